"""scikit-learn style wrappers around refinement and tracking.

Both estimators follow the usual conventions: constructor arguments are
stored verbatim, validation happens in ``fit`` and learned state gets a
trailing underscore. They compose in a :class:`sklearn.pipeline.Pipeline`::

    pipe = Pipeline([("refine", CountConsistencyRefiner()), ("track", OnlineTracker())])
    outputs = pipe.fit_predict(list(zip(frames, densities)))
"""
from __future__ import annotations

from typing import List, Tuple

from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_density_frames, check_frames, check_is_fitted, check_unit_interval
from .density import AdaptiveSigmaConfig
from .model import Detection
from .refine import RefineConfig, RefineReport, refine_frame
from .track import AssocConfig, Tracker, TrackOutput


class CountConsistencyRefiner(TransformerMixin, BaseEstimator):
    """Per-frame detection refinement against a density map.

    ``transform`` takes ``(detections, density)`` pairs and returns the refined
    detection lists. There is nothing to learn, so ``fit`` only validates the
    parameters. The reports of the last ``transform`` call are kept in
    ``reports_``.
    """

    def __init__(self, window=19, add_mass_threshold=0.5, remove_gain_threshold=0.0,
                 max_added_per_frame=50, min_peak_separation=3.0, default_box=(32.0, 80.0),
                 recovered_confidence=0.5, exempt_confidence=0.6,
                 k=3, gamma=0.3, sigma_floor=1.0, sigma_cap=15.0):
        self.window = window
        self.add_mass_threshold = add_mass_threshold
        self.remove_gain_threshold = remove_gain_threshold
        self.max_added_per_frame = max_added_per_frame
        self.min_peak_separation = min_peak_separation
        self.default_box = default_box
        self.recovered_confidence = recovered_confidence
        self.exempt_confidence = exempt_confidence
        self.k = k
        self.gamma = gamma
        self.sigma_floor = sigma_floor
        self.sigma_cap = sigma_cap

    def _config(self) -> RefineConfig:
        check_unit_interval(self.exempt_confidence, "exempt_confidence")
        return RefineConfig(
            window=self.window,
            add_mass_threshold=self.add_mass_threshold,
            remove_gain_threshold=self.remove_gain_threshold,
            max_added_per_frame=self.max_added_per_frame,
            min_peak_separation=self.min_peak_separation,
            default_box=tuple(self.default_box),
            recovered_confidence=self.recovered_confidence,
            exempt_confidence=self.exempt_confidence,
            sigma=AdaptiveSigmaConfig(self.k, self.gamma, self.sigma_floor, self.sigma_cap),
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        if X is not None:
            check_density_frames(X)
        return self

    def transform(self, X) -> List[List[Detection]]:
        check_is_fitted(self, ["config_"])
        out, reports = [], []
        for dets, dens in check_density_frames(X):
            refined, report = refine_frame(dets, dens, self.config_)
            out.append(refined)
            reports.append(report)
        self.reports_: List[RefineReport] = reports
        return out


class OnlineTracker(BaseEstimator):
    """Online tracker over a sequence of per-frame detection lists.

    ``fit`` tracks a whole sequence from scratch and keeps the outputs in
    ``tracks_``; ``predict`` continues the same tracker on further frames and
    ``partial_fit`` advances it by a single frame.
    """

    def __init__(self, lam=0.98, tau=0.5, max_age=30, gating_threshold=9.4877,
                 embedding_momentum=0.9, n_init=3, max_appearance_cost=0.6,
                 init_confidence=0.6, weak_size_noise_scale=100.0):
        self.lam = lam
        self.tau = tau
        self.max_age = max_age
        self.gating_threshold = gating_threshold
        self.embedding_momentum = embedding_momentum
        self.n_init = n_init
        self.max_appearance_cost = max_appearance_cost
        self.init_confidence = init_confidence
        self.weak_size_noise_scale = weak_size_noise_scale

    def _config(self) -> AssocConfig:
        return AssocConfig(
            lam=self.lam, tau=self.tau, max_age=self.max_age,
            gating_threshold=self.gating_threshold,
            embedding_momentum=self.embedding_momentum, n_init=self.n_init,
            max_appearance_cost=self.max_appearance_cost,
            init_confidence=self.init_confidence,
            weak_size_noise_scale=self.weak_size_noise_scale,
        )

    def _reset(self):
        self.tracker_ = Tracker(self._config())
        self.tracks_: List[TrackOutput] = []

    def _run(self, frames) -> List[TrackOutput]:
        out = []
        for dets in frames:
            out.extend(self.tracker_.step(dets))
        self.tracks_.extend(out)
        return out

    def fit(self, X, y=None):
        frames = check_frames(X)
        self._reset()
        self._run(frames)
        return self

    def partial_fit(self, dets, y=None):
        if not hasattr(self, "tracker_"):
            self._reset()
        self._run(check_frames([dets], "dets"))
        return self

    def predict(self, X) -> List[TrackOutput]:
        check_is_fitted(self, ["tracker_"])
        return self._run(check_frames(X))

    def fit_predict(self, X, y=None) -> List[TrackOutput]:
        return self.fit(X).tracks_

    def result_rows(self) -> List[Tuple[int, int, float, float, float, float]]:
        """``(frame, id, x, y, w, h)`` rows of everything tracked so far."""
        check_is_fitted(self, ["tracks_"])
        return [(t.frame, t.id, *t.bbox.to_tuple()) for t in self.tracks_]
