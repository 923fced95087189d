"""Count-consistent crowd tracking on density-map guided detections."""
from .density import AdaptiveSigmaConfig, DensityGrid, IndicatorGrid, window_counts
from .estimators import CountConsistencyRefiner, OnlineTracker
from .io import RunConfig
from .metrics import evaluate
from .model import BBox, Detection, GeometryError, GridGeometry
from .refine import RefineConfig, refine_frame
from .sim import SimConfig, generate
from .track import AssocConfig, Tracker, track_sequence

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSigmaConfig", "AssocConfig", "BBox", "CountConsistencyRefiner", "DensityGrid",
    "Detection", "GeometryError", "GridGeometry", "IndicatorGrid", "OnlineTracker",
    "RefineConfig", "RunConfig", "SimConfig", "Tracker", "evaluate", "generate",
    "refine_frame", "track_sequence", "window_counts",
]
