"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
from sklearn.exceptions import NotFittedError

from .density import DensityGrid
from .model import Detection, GeometryError


def check_frames(X, name: str = "X") -> List[List[Detection]]:
    """A sequence of frames, each a sequence of :class:`Detection`."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"{name} must be a sequence of frames, got {type(X).__name__}")
    frames = []
    for f, frame in enumerate(X):
        if isinstance(frame, Detection):
            raise TypeError(f"{name}[{f}] is a Detection; wrap single frames in a list")
        dets = list(frame)
        for i, d in enumerate(dets):
            if not isinstance(d, Detection):
                raise TypeError(f"{name}[{f}][{i}] must be a Detection, got {type(d).__name__}")
        frames.append(dets)
    return frames


def check_density_frames(X, name: str = "X") -> List[Tuple[List[Detection], DensityGrid]]:
    """A sequence of ``(detections, density)`` pairs with one grid geometry."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"{name} must be a sequence of (detections, density) pairs")
    out = []
    geom = None
    for f, item in enumerate(X):
        try:
            dets, dens = item
        except (TypeError, ValueError):
            raise TypeError(f"{name}[{f}] must be a (detections, density) pair") from None
        if not isinstance(dens, DensityGrid):
            raise TypeError(f"{name}[{f}] density must be a DensityGrid, got {type(dens).__name__}")
        if geom is None:
            geom = dens.geom
        elif dens.geom != geom:
            raise GeometryError(f"{name}[{f}] grid {dens.geom.shape} differs from {geom.shape}")
        out.append((check_frames([dets], name)[0], dens))
    return out


def check_unit_interval(value, name: str, open_low: bool = False, open_high: bool = False) -> float:
    v = float(value)
    lo_ok = v > 0 if open_low else v >= 0
    hi_ok = v < 1 if open_high else v <= 1
    if not (np.isfinite(v) and lo_ok and hi_ok):
        lo = "(" if open_low else "["
        hi = ")" if open_high else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return v


def check_is_fitted(est, attrs: Sequence[str]):
    missing = [a for a in attrs if not hasattr(est, a)]
    if missing:
        raise NotFittedError(
            f"{type(est).__name__} is not fitted yet; call fit before using this method"
        )
