"""scikit-learn style wrappers around the model and the federated simulator.

``X`` is a sequence of slides: :class:`PointSet` objects or ``(coords,
features)`` pairs.  Labels come from ``y`` when given, otherwise from the
slides themselves.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .fed_sim import FedConfig, SiteData, run, score_slides, train_centralized
from .model import ModelConfig, ModelWeights
from .point_ops import PointSet

__all__ = ["check_slides", "check_sites", "PointTransformerClassifier", "FederatedPointTransformer"]


def check_slides(X, y=None, d: int | None = None) -> list[PointSet]:
    """Validate and normalise a slide collection."""
    if isinstance(X, PointSet):
        raise TypeError("X must be a sequence of slides, not a single PointSet")
    slides = []
    for i, item in enumerate(X):
        if isinstance(item, PointSet):
            s = item
        else:
            try:
                coords, feats = item
            except (TypeError, ValueError):
                raise TypeError(f"slide {i}: expected a PointSet or a (coords, features) pair") from None
            s = PointSet(coords, feats, 0)
        if s.n == 0:
            raise ValueError(f"slide {i} has no points")
        if d is not None and s.d != d:
            raise ValueError(f"slide {i} has feature dim {s.d}, expected {d}")
        if not (np.isfinite(s.coords).all() and np.isfinite(s.features).all()):
            raise ValueError(f"slide {i} contains non-finite values")
        slides.append(s)
    if not slides:
        raise ValueError("X is empty")
    dims = {s.d for s in slides}
    if len(dims) > 1:
        raise ValueError(f"slides disagree on feature dim: {sorted(dims)}")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(slides),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(slides)},)")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y must contain only 0 and 1")
        slides = [PointSet(s.coords, s.features, int(lab)) for s, lab in zip(slides, y)]
    return slides


def check_sites(sites) -> list[SiteData]:
    """Accept ``{site_id: X}`` / ``{site_id: (X, y)}`` mappings or SiteData lists."""
    if isinstance(sites, dict):
        out = []
        for sid, value in sites.items():
            if isinstance(value, tuple) and len(value) == 2 and not isinstance(value[0], PointSet):
                out.append(SiteData(str(sid), check_slides(*value)))
            else:
                out.append(SiteData(str(sid), check_slides(value)))
        sites = out
    sites = list(sites)
    if not sites:
        raise ValueError("no sites given")
    for s in sites:
        if not isinstance(s, SiteData):
            raise TypeError("sites must be SiteData objects or a mapping of slides")
    return sites


class _Base(BaseEstimator):
    def _model_config(self, d_in: int) -> ModelConfig:
        return ModelConfig(
            n_points=self.n_points,
            d_in=d_in,
            stage_dims=tuple(self.base_width * 2**i for i in range(self.n_stages + 1)),
            k_neighbors=self.k_neighbors,
            sampling_mode=self.sampling,
            position_mode=self.position,
            query_layers=self.query_layers,
        )

    def _fed_config(self, **extra) -> FedConfig:
        return FedConfig(
            K=self.epochs, lr=self.lr, weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size, dda=self.dda, seed=self.random_state, **extra,
        )

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def _scores(self, weights: ModelWeights, X, rng=None) -> np.ndarray:
        slides = check_slides(X, d=self.model_config_.d_in)
        return score_slides(weights, self.model_config_, slides, seed=self.random_state, rng=rng)


class PointTransformerClassifier(ClassifierMixin, _Base):
    """Single-dataset point-transformer slide classifier.

    ``random_state`` must be an integer: every random draw derives from it
    through named substreams.
    """

    def __init__(self, n_points=1024, base_width=32, n_stages=4, k_neighbors=16, sampling="fcs",
                 position="real", query_layers=2, epochs=200, lr=1e-3, weight_decay=1e-5,
                 warmup_epochs=10, batch_size=8, dda=True, random_state=0):
        self.n_points = n_points
        self.base_width = base_width
        self.n_stages = n_stages
        self.k_neighbors = k_neighbors
        self.sampling = sampling
        self.position = position
        self.query_layers = query_layers
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.dda = dda
        self.random_state = random_state

    def fit(self, X, y=None, init: ModelWeights | None = None):
        slides = check_slides(X, y)
        labels = np.array([s.label for s in slides])
        if labels.min() == labels.max():
            raise ValueError("training data must contain both classes")
        self.model_config_ = self._model_config(slides[0].d)
        cfg = self._fed_config()
        self.weights_, self.history_ = train_centralized(cfg, self.model_config_, SiteData("train", slides), init)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X, rng=None) -> np.ndarray:
        self._check_fitted()
        p = self._scores(self.weights_, X, rng)
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0.5).astype(int)


class FederatedPointTransformer(_Base):
    """Federated training over several sites.

    ``fit`` takes a mapping ``{site_id: (X, y)}`` (or SiteData objects
    with validation slides for model selection).  After fitting,
    ``weights_`` holds the best server weights, or with
    ``federated=False`` a dict of per-site weights.
    """

    def __init__(self, n_points=1024, base_width=32, n_stages=4, k_neighbors=16, sampling="fcs",
                 position="real", query_layers=2, epochs=200, pace=1, lr=1e-3, weight_decay=1e-5,
                 warmup_epochs=10, batch_size=8, dda=True, federated=True, select="best",
                 random_state=0):
        self.n_points = n_points
        self.base_width = base_width
        self.n_stages = n_stages
        self.k_neighbors = k_neighbors
        self.sampling = sampling
        self.position = position
        self.query_layers = query_layers
        self.epochs = epochs
        self.pace = pace
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.dda = dda
        self.federated = federated
        self.select = select
        self.random_state = random_state

    def fit(self, sites, init: ModelWeights | None = None, log=None):
        if self.select not in ("best", "final"):
            raise ValueError("select must be 'best' or 'final'")
        sites = check_sites(sites)
        dims = {s.train[0].d for s in sites if s.train}
        if len(dims) != 1:
            raise ValueError(f"sites disagree on feature dim: {sorted(dims)}")
        self.model_config_ = self._model_config(dims.pop())
        cfg = self._fed_config(E=self.pace, federated=self.federated)
        self.result_ = run(cfg, self.model_config_, sites, init=init, log=log)
        chosen = self.result_.best if self.select == "best" else self.result_.final
        ids = [s.site_id for s in sites]
        self.weights_ = chosen[0] if self.federated else dict(zip(ids, chosen))
        self.site_ids_ = ids
        self.history_ = self.result_.history
        return self

    def _weights_for(self, site) -> ModelWeights:
        if self.federated:
            return self.weights_
        if site is None:
            raise ValueError("isolated training keeps one model per site; pass site=")
        if site not in self.weights_:
            raise KeyError(f"unknown site {site!r}")
        return self.weights_[site]

    def predict_proba(self, X, site=None, rng=None) -> np.ndarray:
        self._check_fitted()
        p = self._scores(self._weights_for(site), X, rng)
        return np.column_stack([1.0 - p, p])

    def predict(self, X, site=None) -> np.ndarray:
        return (self.predict_proba(X, site)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None, site=None) -> float:
        """ROC-AUC on ``X``; NaN when only one class is present."""
        from .metrics import auc

        slides = check_slides(X, y)
        labels = np.array([s.label for s in slides])
        if labels.min() == labels.max():
            return math.nan
        return auc(self.predict_proba(slides, site)[:, 1], labels)
