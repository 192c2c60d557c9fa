"""Synchronous federated training simulator.

Each epoch every site makes one pass over its own training slides with
Adam; every ``E`` epochs the server replaces the synced tensors with the
size-weighted average and broadcasts them back.  Auxiliary classifier
tensors stay local.  ``federated=False`` trains the sites in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .dda import DdaSchedule, draw_masks, loss_total, mask_probability
from .metrics import auc
from .model import ModelConfig, ModelWeights, forward_batch, forward_graph, init_weights, param_tensors
from .point_ops import AugmentConfig, PointSet, augment, subsample
from .seeding import substream

__all__ = [
    "FedConfig",
    "SiteData",
    "SiteState",
    "Adam",
    "RunResult",
    "learning_rate",
    "sync_epochs",
    "make_site",
    "local_epoch",
    "aggregate",
    "broadcast",
    "run",
    "train_centralized",
    "score_slides",
    "evaluate_auc",
]


@dataclass(frozen=True)
class FedConfig:
    K: int = 200
    E: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup_epochs: int = 10
    batch_size: int = 8
    dda: bool = True
    federated: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_batch: int = 32
    validate: bool = True

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be a positive integer")
        if int(self.E) != self.E or self.E < 1:
            raise ValueError("E must be a positive integer")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam hyper-parameters")


def learning_rate(k: int, cfg: FedConfig) -> float:
    """Linear warmup over ``warmup_epochs``, then cosine decay towards 0 at epoch K."""
    W = min(cfg.warmup_epochs, cfg.K)
    if k < W:
        return cfg.lr * (k + 1) / W
    span = cfg.K - W
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (k - W) / span)) if span else cfg.lr


def sync_epochs(K: int, E: int) -> list[int]:
    """Epoch indices after which the server aggregates.

    Every ``E``-th epoch; a pace longer than the run still syncs once at
    the end.
    """
    if E > K:
        return [K - 1]
    return [k for k in range(K) if (k + 1) % E == 0]


class Adam:
    """Adam with L2 regularisation added to the gradient."""

    def __init__(self, params: dict[str, np.ndarray], cfg: FedConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, w in params.items():
            g = grads[name] + c.weight_decay * w
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            params[name] = w - lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


@dataclass
class SiteData:
    site_id: str
    train: list[PointSet]
    val: list[PointSet] = field(default_factory=list)

    def __post_init__(self):
        if not self.train:
            raise ValueError(f"site {self.site_id!r} has no training slides")

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.train], dtype=np.intp)

    @property
    def gamma(self) -> float:
        """Negatives per positive in the training slides."""
        y = self.labels
        pos = int(y.sum())
        return (y.size - pos) / pos if pos else math.inf


@dataclass
class SiteState:
    data: SiteData
    weights: ModelWeights
    opt: Adam
    rng: np.random.Generator  # slide order, subsampling, augmentation, sampling starts
    dda_rng: np.random.Generator

    @property
    def site_id(self) -> str:
        return self.data.site_id

    @property
    def gamma(self) -> float:
        return self.data.gamma

    @property
    def size(self) -> int:
        return len(self.data.train)


def make_site(data: SiteData, index: int, weights: ModelWeights, cfg: FedConfig) -> SiteState:
    w = weights.copy()
    return SiteState(
        data, w, Adam(w.params, cfg),
        substream(cfg.seed, "sampling", index), substream(cfg.seed, "dda", index),
    )


def _dda_schedule(site: SiteState, cfg: FedConfig) -> DdaSchedule:
    # fewer negatives than positives leaves nothing to rebalance
    g = site.gamma
    return DdaSchedule(1.0 if not g >= 1.0 or not math.isfinite(g) else g, cfg.K, cfg.dda)


def _prepare(slides: list[PointSet], n: int, rng, aug: AugmentConfig | None):
    coords, feats = [], []
    for s in slides:
        s = subsample(s, n, rng)
        if aug is not None:
            s = augment(s, aug, rng)
        coords.append(s.coords)
        feats.append(s.features)
    return np.stack(coords), np.stack(feats)


def local_epoch(site: SiteState, k: int, cfg: FedConfig, mcfg: ModelConfig) -> dict:
    """One pass over the site's training slides; returns epoch metrics."""
    if not 0 <= k < cfg.K:
        raise ValueError(f"epoch {k} outside [0, {cfg.K})")
    b = mask_probability(k, _dda_schedule(site, cfg))
    labels = site.data.labels
    masks = draw_masks(labels, b, site.dda_rng)
    order = site.rng.permutation(labels.size)
    lr = learning_rate(k, cfg)
    w = site.weights
    tot_cls = tot_aux = 0.0
    clamped = 0
    # near-equal batches so no step normalises over a lone slide
    for idx in np.array_split(order, -(-order.size // cfg.batch_size)):
        coords, feats = _prepare([site.data.train[i] for i in idx], mcfg.n_points, site.rng, cfg.augment)
        g = Graph()
        T = param_tensors(w, requires_grad=True)
        out = forward_graph(g, T, w.buffers, mcfg, coords, feats, training=True, rng=site.rng)
        parts = loss_total(g, out.probs, out.aux_probs, labels[idx], masks[idx])
        grads = g.backward(parts.total, T)
        site.opt.step(w.params, grads, lr)
        w.buffers = out.buffers
        tot_cls += parts.cls.item() * idx.size
        tot_aux += parts.aux.item() * idx.size
        clamped += parts.clamped
    n = order.size
    return {
        "loss_cls": tot_cls / n,
        "loss_aux": tot_aux / n,
        "mask_rate": float(masks.mean()),
        "keep_prob": b,
        "lr": lr,
        "clamped": clamped,
    }


def aggregate(site_weights: list[ModelWeights], sizes: list[int]) -> ModelWeights:
    """Size-weighted average of synced tensors.

    Auxiliary tensors are copied from the first site; callers keep each
    site's own auxiliary tensors when broadcasting.
    """
    if not site_weights or len(site_weights) != len(sizes):
        raise ValueError("need one size per weight set")
    if any(s <= 0 for s in sizes):
        raise ValueError("site sizes must be positive")
    ref = site_weights[0]
    names = [k for k, _ in ref.items()]
    for w in site_weights[1:]:
        if [k for k, _ in w.items()] != names or any(w.get(k).shape != ref.get(k).shape for k in names):
            raise ValueError("weight sets differ in names or shapes")
    total = float(sum(sizes))
    coef = [s / total for s in sizes]
    out = ref.copy()
    for name in names:
        if not ModelWeights.is_synced(name):
            continue
        acc = coef[0] * site_weights[0].get(name)
        for c, w in zip(coef[1:], site_weights[1:]):
            acc = acc + c * w.get(name)
        out.set(name, acc)
    return out


def broadcast(server: ModelWeights, sites: list[SiteState]):
    """Copy every synced tensor of ``server`` into each site."""
    for s in sites:
        for name in server.synced_names():
            s.weights.set(name, server.get(name).copy())


def score_slides(
    weights: ModelWeights,
    mcfg: ModelConfig,
    slides: list[PointSet],
    *,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    batch: int = 32,
) -> np.ndarray:
    """Positive-class probability per slide.

    Without ``rng`` evaluation is deterministic: slide ``i`` is subsampled
    with a generator keyed on ``(seed, i)`` and sampling starts from the
    largest-norm point.  With ``rng`` both draws come from it (the
    stochastic path used by the stability harness).
    """
    scores = np.empty(len(slides))
    for lo in range(0, len(slides), batch):
        chunk = slides[lo : lo + batch]
        coords, feats = [], []
        for j, s in enumerate(chunk):
            r = rng if rng is not None else substream(seed, "eval", lo + j)
            s = subsample(s, mcfg.n_points, r)
            coords.append(s.coords)
            feats.append(s.features)
        probs, _, _ = forward_batch(weights, mcfg, np.stack(coords), np.stack(feats), rng=rng)
        scores[lo : lo + len(chunk)] = probs[:, 1]
    return scores


def evaluate_auc(weights, mcfg, slides, *, seed: int = 0, rng=None, batch: int = 32) -> float:
    """AUC on ``slides``; NaN when only one class is present."""
    labels = np.array([s.label for s in slides])
    if labels.size == 0 or labels.min() == labels.max():
        return math.nan
    return auc(score_slides(weights, mcfg, slides, seed=seed, rng=rng, batch=batch), labels)


@dataclass
class RunResult:
    history: list[dict]
    final: list[ModelWeights]  # server weights (federated) or one per site
    best: list[ModelWeights]
    best_epoch: list[int]
    best_val_auc: list[float]
    n_syncs: int
    sites: list[SiteState]
    federated: bool


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def _better(new: float, old: float) -> bool:
    # without any validation signal the latest weights win
    if math.isnan(old):
        return True
    return not math.isnan(new) and new > old


def run(
    cfg: FedConfig,
    mcfg: ModelConfig,
    sites: list[SiteData],
    init: ModelWeights | None = None,
    log=None,
) -> RunResult:
    """Train all sites for ``cfg.K`` epochs.

    Federated runs validate the server weights after every sync and keep
    the best by mean validation AUC.  Isolated runs (``federated=False``)
    validate every ``E`` epochs and keep each site's best.
    """
    if not sites:
        raise ValueError("need at least one site")
    init = init if init is not None else init_weights(mcfg, substream(cfg.seed, "init"))
    states = [make_site(d, i, init, cfg) for i, d in enumerate(sites)]
    syncs = set(sync_epochs(cfg.K, cfg.E))
    M = len(states)
    history: list[dict] = []
    best = [init.copy() for _ in range(1 if cfg.federated else M)]
    best_auc = [math.nan] * len(best)
    best_epoch = [-1] * len(best)
    n_syncs = 0
    server = init.copy()
    for k in range(cfg.K):
        for s in states:
            row = {"epoch": k, "site": s.site_id, **local_epoch(s, k, cfg, mcfg), "val_auc": math.nan}
            history.append(row)
        if k not in syncs:
            continue
        if cfg.federated:
            server = aggregate([s.weights for s in states], [s.size for s in states])
            broadcast(server, states)
            n_syncs += 1
            site_aucs = []
            if cfg.validate:
                site_aucs = [evaluate_auc(server, mcfg, s.data.val, seed=cfg.seed, batch=cfg.eval_batch)
                             for s in states]
                for row, a in zip(history[-M:], site_aucs):
                    row["val_auc"] = a
            mean_auc = _nanmean(site_aucs)
            history.append({"epoch": k, "site": "server", "loss_cls": math.nan, "loss_aux": math.nan,
                            "mask_rate": math.nan, "val_auc": mean_auc})
            if _better(mean_auc, best_auc[0]):
                best[0], best_auc[0], best_epoch[0] = server.copy(), mean_auc, k
        else:
            for i, s in enumerate(states):
                a = math.nan
                if cfg.validate:
                    a = evaluate_auc(s.weights, mcfg, s.data.val, seed=cfg.seed, batch=cfg.eval_batch)
                history[-M + i]["val_auc"] = a
                if _better(a, best_auc[i]):
                    best[i], best_auc[i], best_epoch[i] = s.weights.copy(), a, k
        if log is not None:
            log(k, history)
    final = [server] if cfg.federated else [s.weights for s in states]
    return RunResult(history, final, best, best_epoch, best_auc, n_syncs, states, cfg.federated)


def train_centralized(cfg: FedConfig, mcfg: ModelConfig, data: SiteData,
                      init: ModelWeights | None = None) -> tuple[ModelWeights, list[dict]]:
    """Plain single-dataset training with the same streams as site 0 of :func:`run`."""
    init = init if init is not None else init_weights(mcfg, substream(cfg.seed, "init"))
    site = make_site(data, 0, init, cfg)
    history = [{"epoch": k, **local_epoch(site, k, cfg, mcfg)} for k in range(cfg.K)]
    return site.weights, history

