"""Finite-difference gradient checks for every primitive and the full model.

Each case builds a scalar ``sum(op(...) * W)`` with a fixed random
projection ``W`` so that every output entry contributes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import GradCheckReport, Graph, Tensor, check_gradients
from .dda import loss_total
from .model import ModelConfig, forward_graph, init_weights, param_tensors

__all__ = ["GradCase", "primitive_cases", "model_case", "run_suite"]


@dataclass
class GradCase:
    name: str
    fn: Callable[[Graph, dict[str, Tensor]], Tensor]
    params: dict[str, np.ndarray]
    max_entries: int | None = None


def _projected(g: Graph, y: Tensor, w: np.ndarray) -> Tensor:
    return g.sum(g.mul(y, Tensor(w)))


def primitive_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    cases = []

    def add(name, build, params, out_shape):
        w = r(out_shape)
        cases.append(GradCase(name, lambda g, T: _projected(g, build(g, T), w), params))

    add("linear", lambda g, T: g.linear(T["x"], T["w"], T["b"]),
        {"x": r((2, 3, 4)), "w": r((4, 5)), "b": r(5)}, (2, 3, 5))
    add("relu", lambda g, T: g.relu(T["x"]), {"x": r((3, 7))}, (3, 7))
    add("softmax", lambda g, T: g.softmax(T["x"], axis=1), {"x": r((2, 5, 3))}, (2, 5, 3))
    add("add_broadcast", lambda g, T: g.add(T["a"], T["b"]), {"a": r((2, 3, 4)), "b": r((3, 1))}, (2, 3, 4))
    add("sub_broadcast", lambda g, T: g.sub(T["a"], T["b"]), {"a": r((2, 1, 4)), "b": r((3, 4))}, (2, 3, 4))
    add("mul_broadcast", lambda g, T: g.mul(T["a"], T["b"]), {"a": r((2, 3, 4)), "b": r(4)}, (2, 3, 4))
    add("sum", lambda g, T: g.sum(T["x"], axis=(0, 2)), {"x": r((2, 3, 4))}, (3,))
    add("mean", lambda g, T: g.mean(T["x"], axis=1, keepdims=True), {"x": r((2, 3, 4))}, (2, 1, 4))
    add("max", lambda g, T: g.max(T["x"], axis=2), {"x": r((2, 3, 5))}, (2, 3))
    add("reshape", lambda g, T: g.reshape(T["x"], (4, 6)), {"x": r((2, 3, 4))}, (4, 6))
    add("log", lambda g, T: g.log(T["x"]), {"x": rng.uniform(0.5, 2.0, (3, 4))}, (3, 4))
    add("concat", lambda g, T: g.concat([T["a"], T["b"]], axis=-1), {"a": r((2, 3)), "b": r((2, 2))}, (2, 5))
    idx = rng.integers(0, 6, size=(2, 4, 3))
    add("gather", lambda g, T: g.gather(T["x"], idx), {"x": r((2, 6, 3))}, (2, 4, 3, 3))
    rm, rv = np.zeros(4), np.ones(4)
    add("batch_norm_train",
        lambda g, T: g.batch_norm(T["x"], T["gamma"], T["beta"], axes=(0, 1), training=True,
                                  running_mean=rm, running_var=rv)[0],
        {"x": r((3, 5, 4)), "gamma": r(4), "beta": r(4)}, (3, 5, 4))
    erm, erv = r(4), rng.uniform(0.5, 2.0, 4)
    add("batch_norm_eval",
        lambda g, T: g.batch_norm(T["x"], T["gamma"], T["beta"], axes=(0, 1), training=False,
                                  running_mean=erm, running_var=erv)[0],
        {"x": r((3, 5, 4)), "gamma": r(4), "beta": r(4)}, (3, 5, 4))
    labels, masks = np.array([0, 1, 1]), np.array([1.0, 0.0, 1.0])
    cases.append(GradCase(
        "dda_loss",
        lambda g, T: loss_total(g, g.softmax(T["z"]), g.softmax(T["za"]), labels, masks).total,
        {"z": r((3, 2)), "za": r((3, 2))},
    ))
    return cases


def model_case(seed: int = 0, n_points: int = 64, d_in: int = 8, base: int = 32,
               max_entries: int | None = 8) -> GradCase:
    """Whole network with the DDA loss; sampling choices are frozen at the start point."""
    cfg = ModelConfig(n_points=n_points, d_in=d_in, stage_dims=tuple(base * 2**i for i in range(4)))
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, rng)
    coords = rng.random((2, n_points, 3))
    coords[..., 2] = 1.0
    feats = rng.standard_normal((2, n_points, d_in))
    plan = forward_graph(Graph(record=False), param_tensors(weights), weights.buffers, cfg, coords, feats,
                         training=True).plan
    labels, masks = np.array([0, 1]), np.array([1.0, 1.0])

    def fn(g, T):
        out = forward_graph(g, T, weights.buffers, cfg, coords, feats, training=True, plan=plan)
        return loss_total(g, out.probs, out.aux_probs, labels, masks).total

    return GradCase(f"model(N={n_points}, d_in={d_in})", fn, dict(weights.params), max_entries)


def run_suite(seed: int = 0, include_model: bool = True, tol: float = 1e-4,
              model_entries: int | None = 8) -> tuple[list[tuple[str, GradCheckReport]], float]:
    """Run every case; returns ``[(name, report)]`` and the wall time in seconds."""
    t0 = time.perf_counter()
    cases = primitive_cases(seed)
    if include_model:
        cases.append(model_case(seed, max_entries=model_entries))
    out = []
    for case in cases:
        rep = check_gradients(case.fn, case.params, tol=tol, max_entries=case.max_entries,
                              rng=np.random.default_rng(seed))
        out.append((case.name, rep))
    return out, time.perf_counter() - t0
