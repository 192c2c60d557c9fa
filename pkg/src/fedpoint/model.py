"""Point transformer for slide-level binary classification.

Pipeline: feature embedding, then ``n_stages`` repetitions of a local
vector-attention block followed by a downsample-and-group block, global
average pooling, a two-layer head producing the slide embedding, and two
linear softmax classifiers (main and auxiliary).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Graph, Tensor
from .point_ops import PointSet, default_start, farthest_sample, knn_indices

__all__ = [
    "AUX_PREFIX",
    "ModelConfig",
    "ModelWeights",
    "StagePlan",
    "ForwardOutput",
    "init_weights",
    "forward",
    "forward_batch",
    "forward_graph",
    "param_tensors",
    "transformer_block",
    "abstraction_block",
]

AUX_PREFIX = "aux."
SAMPLING_MODES = ("fcs", "fps")
POSITION_MODES = ("real", "all_zero", "all_one")


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 1024
    d_in: int = 32
    stage_dims: tuple[int, ...] = (32, 64, 128, 256, 512)
    k_neighbors: int = 16
    downsample_factor: int = 4
    n_classes: int = 2
    sampling_mode: str = "fcs"
    position_mode: str = "real"
    head_dim: int = 64
    attention: str = "vector"
    query_layers: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(int(c) for c in self.stage_dims))
        dims = self.stage_dims
        if len(dims) < 2:
            raise ValueError("stage_dims needs an entry width plus one width per stage")
        if any(dims[i] != dims[0] * 2**i for i in range(len(dims))):
            raise ValueError(f"stage_dims must double at every stage, got {dims}")
        if self.downsample_factor < 2:
            raise ValueError("downsample_factor must be at least 2")
        per = self.downsample_factor ** self.n_stages
        if self.n_points % per:
            raise ValueError(f"n_points={self.n_points} must be divisible by {per}")
        if self.k_neighbors < 1 or self.d_in < 1 or self.head_dim < 1:
            raise ValueError("k_neighbors, d_in and head_dim must be positive")
        if self.n_classes != 2:
            raise ValueError("only binary classification is supported")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.position_mode not in POSITION_MODES:
            raise ValueError(f"position_mode must be one of {POSITION_MODES}")
        if self.attention not in ("vector", "scalar"):
            raise ValueError("attention must be 'vector' or 'scalar'")
        if self.query_layers not in (1, 2):
            raise ValueError("query_layers must be 1 or 2")

    @property
    def n_stages(self) -> int:
        return len(self.stage_dims) - 1

    def stage_shapes(self) -> list[tuple[int, int]]:
        """(points, channels) after each stage."""
        f = self.downsample_factor
        return [(self.n_points // f**i, self.stage_dims[i]) for i in range(1, self.n_stages + 1)]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "stage_dims" in d:
            d["stage_dims"] = tuple(d["stage_dims"])
        return cls(**d)


@dataclass
class ModelWeights:
    """Learnable parameters plus batch-norm running statistics.

    Every tensor whose name starts with ``aux.`` belongs to the auxiliary
    classifier and is kept out of federated synchronisation.
    """

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def items(self):
        """All tensors (parameters then buffers) in a fixed order."""
        yield from self.params.items()
        yield from self.buffers.items()

    @staticmethod
    def is_synced(name: str) -> bool:
        return not name.startswith(AUX_PREFIX)

    def aux_names(self) -> set[str]:
        return {k for k, _ in self.items() if not self.is_synced(k)}

    def synced_names(self) -> list[str]:
        return [k for k, _ in self.items() if self.is_synced(k)]

    def get(self, name: str) -> np.ndarray:
        return self.params[name] if name in self.params else self.buffers[name]

    def set(self, name: str, value: np.ndarray):
        if name in self.params:
            self.params[name] = value
        else:
            self.buffers[name] = value

    def equals(self, other: "ModelWeights", names=None) -> bool:
        names = names if names is not None else [k for k, _ in self.items()]
        return all(
            self.get(k).shape == other.get(k).shape
            and self.get(k).tobytes() == other.get(k).tobytes()
            for k in names
        )


# -- initialisation ---------------------------------------------------------

def _linear_init(params, rng, name, fan_in, fan_out, bias=True):
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    if bias:
        params[f"{name}.bias"] = rng.uniform(-bound, bound, size=fan_out)


def init_weights(cfg: ModelConfig, rng: np.random.Generator) -> ModelWeights:
    """Uniform fan-in scaled initialisation, bound ``1/sqrt(fan_in)``."""
    p: dict[str, np.ndarray] = {}
    buf: dict[str, np.ndarray] = {}
    c0 = cfg.stage_dims[0]
    _linear_init(p, rng, "embed.0", cfg.d_in, c0)
    _linear_init(p, rng, "embed.1", c0, c0)
    for s in range(1, cfg.n_stages + 1):
        c = cfg.stage_dims[s - 1]
        a = f"stage{s}.attn"
        for sym in ("w_i", "w_j", "w_v", "w_z"):
            _linear_init(p, rng, f"{a}.{sym}", c, c, bias=False)
        q_out = 1 if cfg.attention == "scalar" else c
        if cfg.query_layers == 2:
            _linear_init(p, rng, f"{a}.q.0", c, c)
            _linear_init(p, rng, f"{a}.q.1", c, q_out)
        else:
            _linear_init(p, rng, f"{a}.q.0", c, q_out)
        _linear_init(p, rng, f"{a}.pe.0", 3, c)
        _linear_init(p, rng, f"{a}.pe.1", c, c)
        widths = (c, 2 * c, 2 * c)
        for layer in range(2):
            name = f"stage{s}.group.{layer}"
            _linear_init(p, rng, name, widths[layer], widths[layer + 1])
            out = widths[layer + 1]
            p[f"{name}.bn.gamma"] = np.ones(out)
            p[f"{name}.bn.beta"] = np.zeros(out)
            buf[f"{name}.bn.running_mean"] = np.zeros(out)
            buf[f"{name}.bn.running_var"] = np.ones(out)
    _linear_init(p, rng, "head.0", cfg.stage_dims[-1], cfg.head_dim)
    _linear_init(p, rng, "head.1", cfg.head_dim, cfg.head_dim)
    _linear_init(p, rng, "cls", cfg.head_dim, cfg.n_classes)
    _linear_init(p, rng, AUX_PREFIX + "cls", cfg.head_dim, cfg.n_classes)
    return ModelWeights(p, buf)


# -- blocks -----------------------------------------------------------------

@dataclass
class StagePlan:
    """Non-differentiable index choices of one stage (batched)."""

    knn: np.ndarray  # (B, m, k) neighbours for attention
    sample: np.ndarray  # (B, m // f) sampled rows
    group: np.ndarray  # (B, m // f, kg) grouping neighbours


def _attention(g: Graph, T, prefix: str, x: Tensor, p: np.ndarray, idx: np.ndarray,
               cfg: ModelConfig):
    """Vector attention over each point's neighbourhood.

    ``x`` is (B, m, c), ``p`` the (B, m, 3) positions, ``idx`` (B, m, k).
    Returns the block output and the attention weights.
    """
    B, m, c = x.shape
    k = idx.shape[-1]
    a = g.reshape(g.linear(x, T[f"{prefix}.w_i.weight"]), (B, m, 1, c))
    b = g.gather(g.linear(x, T[f"{prefix}.w_j.weight"]), idx)
    h = g.sub(a, b)
    h = g.linear(h, T[f"{prefix}.q.0.weight"], T[f"{prefix}.q.0.bias"])
    if cfg.query_layers == 2:
        h = g.linear(g.relu(h), T[f"{prefix}.q.1.weight"], T[f"{prefix}.q.1.bias"])

    ar = np.arange(B)[:, None, None]
    rel = Tensor(p[:, :, None, :] - p[ar, idx])
    pe = g.relu(g.linear(rel, T[f"{prefix}.pe.0.weight"], T[f"{prefix}.pe.0.bias"]))
    pe = g.linear(pe, T[f"{prefix}.pe.1.weight"], T[f"{prefix}.pe.1.bias"])

    if cfg.attention == "vector":
        score = g.add(h, pe)
    else:
        score = g.add(h, g.mean(pe, axis=-1, keepdims=True))
    weights = g.softmax(score, axis=2)
    v = g.add(g.gather(g.linear(x, T[f"{prefix}.w_v.weight"]), idx), pe)
    z = g.sum(g.mul(weights, v), axis=2)
    y = g.add(x, g.linear(z, T[f"{prefix}.w_z.weight"]))
    assert y.shape == (B, m, c) and weights.shape[:3] == (B, m, k)
    return y, weights


def _group(g: Graph, T, buffers, prefix: str, x: Tensor, idx: np.ndarray, training: bool,
           new_buffers: dict):
    """Gather neighbourhoods, two linear+BN+ReLU layers, max over neighbours.

    Training-mode statistics pool every slide in the batch.  Per-slide
    statistics would standardise away whatever the points of a slide have
    in common, which at the last stage is the whole slide-level signal.
    """
    h = g.gather(x, idx)  # (B, q, k, c)
    for layer in range(2):
        name = f"{prefix}.{layer}"
        h = g.linear(h, T[f"{name}.weight"], T[f"{name}.bias"])
        rm_key, rv_key = f"{name}.bn.running_mean", f"{name}.bn.running_var"
        h, (rm, rv) = g.batch_norm(
            h, T[f"{name}.bn.gamma"], T[f"{name}.bn.beta"], axes=(0, 1, 2), training=training,
            running_mean=buffers[rm_key], running_var=buffers[rv_key],
        )
        new_buffers[rm_key], new_buffers[rv_key] = rm, rv
        h = g.relu(h)
    return g.max(h, axis=2)


def _positions(coords: np.ndarray, mode: str) -> np.ndarray:
    if mode == "all_zero":
        return np.zeros_like(coords)
    if mode == "all_one":
        return np.ones_like(coords)
    return coords


def _sample(values: np.ndarray, m_out: int, mode: str, rng, start_from: np.ndarray):
    B, m, _ = values.shape
    start = rng.integers(0, m, size=B) if rng is not None else default_start(start_from)
    metric = "cosine" if mode == "fcs" else "euclidean"
    return farthest_sample(values, m_out, start, metric)


@dataclass
class ForwardOutput:
    probs: Tensor  # (B, 2) main classifier
    aux_probs: Tensor  # (B, 2) auxiliary classifier
    embedding: Tensor  # (B, head_dim) slide feature
    buffers: dict[str, np.ndarray]  # batch-norm statistics after this pass
    plan: list[StagePlan]
    stage_shapes: list[tuple[int, int]]
    attention: list[np.ndarray]


def forward_graph(
    g: Graph,
    T: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    cfg: ModelConfig,
    coords: np.ndarray,
    features: np.ndarray,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
    plan: list[StagePlan] | None = None,
) -> ForwardOutput:
    """Batched forward pass recorded on ``g``.

    ``coords`` is (B, N, 3) and ``features`` (B, N, d_in).  ``rng`` draws
    the sampling start points; when it is ``None`` the deterministic start
    rule is used.  A previously returned ``plan`` replays the same sampling
    and neighbour choices.
    """
    coords = np.asarray(coords, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if coords.ndim != 3 or features.ndim != 3 or coords.shape[:2] != features.shape[:2]:
        raise ValueError(f"bad batch shapes {coords.shape} / {features.shape}")
    if coords.shape[1] != cfg.n_points:
        raise ValueError(f"expected {cfg.n_points} points per slide, got {coords.shape[1]}")
    if features.shape[2] != cfg.d_in:
        raise ValueError(f"expected {cfg.d_in} features per point, got {features.shape[2]}")

    p = _positions(coords, cfg.position_mode)
    x = Tensor(features)
    x = g.relu(g.linear(x, T["embed.0.weight"], T["embed.0.bias"]))
    x = g.relu(g.linear(x, T["embed.1.weight"], T["embed.1.bias"]))

    new_buffers = dict(buffers)
    used_plan, shapes, attn = [], [], []
    for s in range(1, cfg.n_stages + 1):
        m = x.shape[1]
        k = min(cfg.k_neighbors, m)
        step = plan[s - 1] if plan is not None else None
        knn_idx = step.knn if step else knn_indices(p, p, k)
        x, w = _attention(g, T, f"stage{s}.attn", x, p, knn_idx, cfg)
        attn.append(w.values)
        m_out = m // cfg.downsample_factor
        if step:
            sample = step.sample
        else:
            vals = x.values if cfg.sampling_mode == "fcs" else p
            sample = _sample(vals, m_out, cfg.sampling_mode, rng, x.values)
        centers = np.take_along_axis(p, sample[:, :, None], axis=1)
        # centres are rows of p, so their neighbourhoods are rows of knn_idx
        group = step.group if step else np.take_along_axis(knn_idx, sample[:, :, None], axis=1)
        x = _group(g, T, buffers, f"stage{s}.group", x, group, training, new_buffers)
        p = centers
        used_plan.append(StagePlan(knn_idx, sample, group))
        shapes.append(x.shape[1:])

    pooled = g.mean(x, axis=1)
    h = g.relu(g.linear(pooled, T["head.0.weight"], T["head.0.bias"]))
    h = g.relu(g.linear(h, T["head.1.weight"], T["head.1.bias"]))
    probs = g.softmax(g.linear(h, T["cls.weight"], T["cls.bias"]), axis=-1)
    aux = g.softmax(g.linear(h, T[AUX_PREFIX + "cls.weight"], T[AUX_PREFIX + "cls.bias"]), axis=-1)
    if not training:
        new_buffers = dict(buffers)
    return ForwardOutput(probs, aux, h, new_buffers, used_plan, shapes, attn)


def param_tensors(weights: ModelWeights, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in weights.params.items()}


def forward_batch(
    weights: ModelWeights,
    cfg: ModelConfig,
    coords: np.ndarray,
    features: np.ndarray,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient-free batched pass; returns (probs, aux_probs, embedding)."""
    out = forward_graph(
        Graph(record=False), param_tensors(weights), weights.buffers, cfg, coords, features,
        training=training, rng=rng,
    )
    return out.probs.values, out.aux_probs.values, out.embedding.values


def forward(
    points: PointSet,
    weights: ModelWeights,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-slide pass; ``points.n`` must equal ``cfg.n_points``.

    Returns the main class probabilities, the auxiliary class probabilities
    and the slide embedding.  In ``"train"`` mode batch-norm uses the
    statistics of this slide; running statistics are never modified here.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if points.n != cfg.n_points:
        raise ValueError(f"expected {cfg.n_points} points, got {points.n}; subsample first")
    probs, aux, emb = forward_batch(
        weights, cfg, points.coords[None], points.features[None], training=mode == "train", rng=rng,
    )
    return probs[0], aux[0], emb[0]


# -- single-slide block entry points ---------------------------------------

def transformer_block(
    features: np.ndarray,
    coords: np.ndarray,
    k: int,
    weights: ModelWeights,
    stage: int = 1,
    cfg: ModelConfig | None = None,
    return_attention: bool = False,
):
    """Apply the attention block of ``stage`` to one (m, c) point set."""
    cfg = cfg or ModelConfig()
    features = np.asarray(features, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    m = features.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} points, got {m}")
    idx = knn_indices(coords[None], coords[None], k)
    y, w = _attention(Graph(record=False), param_tensors(weights), f"stage{stage}.attn",
                      Tensor(features[None]), coords[None], idx, cfg)
    return (y.values[0], w.values[0]) if return_attention else y.values[0]


def abstraction_block(
    features: np.ndarray,
    coords: np.ndarray,
    weights: ModelWeights,
    stage: int = 1,
    mode: str = "fcs",
    k: int = 16,
    downsample_factor: int = 4,
    training: bool = True,
    start: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Downsample one (m, c) point set by ``downsample_factor`` and group.

    Returns the new (m/f, 2c) features and (m/f, 3) coordinates.
    """
    features = np.asarray(features, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    m = features.shape[0]
    if m < downsample_factor or m % downsample_factor:
        raise ValueError(f"point count {m} must be a positive multiple of {downsample_factor}")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"mode must be one of {SAMPLING_MODES}")
    vals = features if mode == "fcs" else coords
    if start is None:
        start = int(default_start(features))
    sample = farthest_sample(vals[None], m // downsample_factor, start,
                             "cosine" if mode == "fcs" else "euclidean")
    centers = coords[sample[0]]
    group = knn_indices(centers[None], coords[None], min(k, m))
    out = _group(Graph(record=False), param_tensors(weights), weights.buffers,
                 f"stage{stage}.group", Tensor(features[None]), group, training, {})
    return out.values[0], centers
