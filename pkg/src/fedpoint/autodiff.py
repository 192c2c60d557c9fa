"""Minimal reverse-mode differentiation over dense float64 arrays.

Graphs are recorded eagerly: every operation called on a :class:`Graph`
computes its value immediately and, when any input requires a gradient,
appends a node to the tape.  :meth:`Graph.backward` then walks the tape in
reverse.  Only the handful of primitives the point transformer needs are
provided, but each is coarse (a whole linear layer, a whole batch-norm) so
that the Python overhead per slide stays small.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ShapeError",
    "Tensor",
    "Node",
    "Graph",
    "GradCheckReport",
    "check_gradients",
    "relative_error",
]


class ShapeError(ValueError):
    """Raised at graph construction when operand shapes are inconsistent."""


class Tensor:
    """Dense float64 array, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = _rsum(grad, tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = _rsum(grad, axes, keepdims=True)
    return grad


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def _rsum(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Sum over ``axis``; einsum is much faster than ufunc.reduce on strided axes."""
    axes = _norm_axes(axis, x.ndim)
    if not axes or (x.ndim - 1) in axes:
        return x.sum(axis=axes, keepdims=keepdims)
    src = _LETTERS[: x.ndim]
    dst = "".join(c for i, c in enumerate(src) if i not in axes)
    y = np.einsum(f"{src}->{dst}", x)
    return np.expand_dims(y, axes) if keepdims else y


def _colsum(x2: np.ndarray) -> np.ndarray:
    return np.ones(x2.shape[0]) @ x2


def _rmax(x: np.ndarray, axis: int, with_arg: bool = True):
    """Max over one axis and the lowest index attaining it."""
    axis = axis % x.ndim
    if not with_arg and axis == x.ndim - 1:
        return x.max(axis=axis), None
    if axis == x.ndim - 1:
        arg = x.argmax(axis=axis)
        return np.take_along_axis(x, arg[..., None], axis=axis)[..., 0], arg
    slices = np.moveaxis(x, axis, 0)
    mx = slices[0].copy()
    for s in slices[1:]:
        np.maximum(mx, s, out=mx)
    if not with_arg:
        return mx, None
    arg = np.zeros(mx.shape, dtype=np.intp)
    for i in range(len(slices) - 1, -1, -1):
        arg[slices[i] == mx] = i
    return mx, arg


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Tape of recorded operations.

    With ``record=False`` the graph only evaluates values (inference mode);
    nothing is kept for the backward pass.  With ``track_kinks=True`` the
    branch taken by every relu, max and log floor is logged in ``kinks`` so
    two evaluations can be tested for lying on the same smooth piece.
    """

    def __init__(self, record: bool = True, track_kinks: bool = False):
        self.record = record
        self.kinks: list[bytes] | None = [] if track_kinks else None
        self.nodes: list[Node] = []
        self._count = 0
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    # -- bookkeeping -------------------------------------------------------
    def _next_id(self) -> int:
        self._count += 1
        return self._count - 1

    def _fail(self, nid: int, op: str, msg: str):
        raise ShapeError(f"node {nid} ({op}): {msg}")

    def _emit(self, nid, op, inputs, values, backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(values, requires_grad=needs)
        if needs:
            for t in inputs:
                if t.requires_grad and id(t) not in self._produced:
                    self._leaves[id(t)] = t
            self.nodes.append(Node(nid, op, tuple(inputs), out, backward))
            self._produced.add(id(out))
        return out

    # -- primitives --------------------------------------------------------
    def linear(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
        nid = self._next_id()
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            self._fail(nid, "linear", f"input {x.shape} incompatible with weight {w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            self._fail(nid, "linear", f"bias {b.shape} does not match weight {w.shape}")
        xv, wv = x.values, w.values
        x2 = xv.reshape(-1, wv.shape[0])
        y2 = x2 @ wv
        if b is not None:
            y2 += b.values
        out_shape = xv.shape[:-1] + (wv.shape[1],)

        def backward(g):
            g2 = g.reshape(-1, wv.shape[1])
            gx = (g2 @ wv.T).reshape(xv.shape) if x.requires_grad else None
            gw = x2.T @ g2 if w.requires_grad else None
            if b is None:
                return gx, gw
            gb = _colsum(g2) if b.requires_grad else None
            return gx, gw, gb

        inputs = (x, w) if b is None else (x, w, b)
        return self._emit(nid, "linear", inputs, y2.reshape(out_shape), backward)

    def relu(self, x: Tensor) -> Tensor:
        nid = self._next_id()
        y = np.maximum(x.values, 0.0)
        if self.kinks is not None:
            self.kinks.append(np.packbits(x.values > 0).tobytes())
        return self._emit(nid, "relu", (x,), y, lambda g: (g * (y > 0),))

    def softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        nid = self._next_id()
        xv = x.values
        top = np.expand_dims(_rmax(xv, axis, with_arg=False)[0], axis)
        e = np.exp(xv - top)
        y = e / _rsum(e, axis, keepdims=True)

        def backward(g):
            return (y * (g - _rsum(g * y, axis, keepdims=True)),)

        return self._emit(nid, "softmax", (x,), y, backward)

    def _binary(self, op, a, b, fn, grads):
        nid = self._next_id()
        a, b = _as_tensor(a), _as_tensor(b)
        try:
            y = fn(a.values, b.values)
        except ValueError as exc:
            self._fail(nid, op, f"cannot broadcast {a.shape} with {b.shape} ({exc})")

        def backward(g):
            ga, gb = grads(g, a.values, b.values)
            return (
                _unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(gb, b.shape) if b.requires_grad else None,
            )

        return self._emit(nid, op, (a, b), y, backward)

    def add(self, a, b) -> Tensor:
        return self._binary("add", a, b, np.add, lambda g, av, bv: (g, g))

    def sub(self, a, b) -> Tensor:
        return self._binary("sub", a, b, np.subtract, lambda g, av, bv: (g, -g))

    def mul(self, a, b) -> Tensor:
        return self._binary("mul", a, b, np.multiply, lambda g, av, bv: (g * bv, g * av))

    def sum(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        nid = self._next_id()
        xv = x.values
        y = _rsum(xv, axis, keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, xv.shape),)

        return self._emit(nid, "sum", (x,), y, backward)

    def mean(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        nid = self._next_id()
        xv = x.values
        count = int(np.prod([xv.shape[a] for a in _norm_axes(axis, xv.ndim)]))
        y = _rsum(xv, axis, keepdims) / count

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, xv.shape),)

        return self._emit(nid, "mean", (x,), y, backward)

    def max(self, x: Tensor, axis: int) -> Tensor:
        """Max over one axis; ties send the gradient to the lowest index."""
        nid = self._next_id()
        xv = x.values
        y, arg = _rmax(xv, axis)
        if self.kinks is not None:
            self.kinks.append(arg.tobytes())
        arg = np.expand_dims(arg, axis)

        def backward(g):
            gx = np.zeros_like(xv)
            np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return self._emit(nid, "max", (x,), y, backward)

    def reshape(self, x: Tensor, shape) -> Tensor:
        nid = self._next_id()
        xv = x.values
        try:
            y = xv.reshape(shape)
        except ValueError as exc:
            self._fail(nid, "reshape", str(exc))
        return self._emit(nid, "reshape", (x,), y, lambda g: (g.reshape(xv.shape),))

    def log(self, x: Tensor, floor: float = 1e-12) -> Tensor:
        """``log(max(x, floor))``; clamped entries pass no gradient."""
        nid = self._next_id()
        xv = x.values
        ok = xv > floor
        if self.kinks is not None:
            self.kinks.append(np.packbits(ok).tobytes())
        y = np.log(np.where(ok, xv, floor))
        return self._emit(nid, "log", (x,), y,
                          lambda g: (np.where(ok, g / np.where(ok, xv, 1.0), 0.0),))

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        nid = self._next_id()
        vals = [t.values for t in xs]
        try:
            y = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            self._fail(nid, "concat", str(exc))
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._emit(nid, "concat", tuple(xs), y, backward)

    def gather(self, x: Tensor, index: np.ndarray) -> Tensor:
        """Row gather per batch item.

        ``x`` is (B, m, c) and ``index`` is an integer array (B, ...) of row
        numbers into ``x[b]``; the result is (B, ..., c).
        """
        nid = self._next_id()
        xv = x.values
        index = np.asarray(index)
        if xv.ndim != 3 or index.shape[0] != xv.shape[0]:
            self._fail(nid, "gather", f"source {xv.shape} incompatible with index {index.shape}")
        B, m, c = xv.shape
        if index.size and (index.min() < 0 or index.max() >= m):
            self._fail(nid, "gather", f"index out of range for {m} rows")
        offsets = (np.arange(B) * m).reshape((B,) + (1,) * (index.ndim - 1))
        flat = (index + offsets).reshape(-1)
        y = xv.reshape(B * m, c)[flat].reshape(index.shape + (c,))

        def backward(g):
            scatter = sp.csr_matrix(
                (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(B * m, flat.size)
            )
            return (np.asarray(scatter @ g.reshape(flat.size, c)).reshape(B, m, c),)

        return self._emit(nid, "gather", (x,), y, backward)

    def batch_norm(
        self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        *,
        axes: tuple[int, ...],
        training: bool,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
        """Batch normalisation over ``axes``; the channel axis is last.

        In training mode statistics are taken over ``axes`` separately for
        every remaining non-channel index (a "group", e.g. one slide), and
        the running statistics are updated once per group in order.  Returns
        the output and the new running statistics (the inputs are not
        modified).
        """
        nid = self._next_id()
        xv = x.values
        C = xv.shape[-1]
        if gamma.shape != (C,) or beta.shape != (C,):
            self._fail(nid, "batch_norm", f"scale/shift must be ({C},)")
        if (xv.ndim - 1) in [a % xv.ndim for a in axes]:
            self._fail(nid, "batch_norm", "cannot reduce over the channel axis")
        gv, bv = gamma.values, beta.values
        if not training:
            inv = 1.0 / np.sqrt(running_var + eps)
            xhat = (xv - running_mean) * inv
            y = xhat * gv + bv

            def backward(g):
                g2 = g.reshape(-1, C)
                return (
                    g * (gv * inv) if x.requires_grad else None,
                    _colsum(g2 * xhat.reshape(-1, C)) if gamma.requires_grad else None,
                    _colsum(g2) if beta.requires_grad else None,
                )

            return self._emit(nid, "batch_norm", (x, gamma, beta), y, backward), (
                running_mean, running_var)

        n = int(np.prod([xv.shape[a] for a in axes]))
        mu = _rsum(xv, axes, keepdims=True) / n
        centered = xv - mu
        var = _rsum(centered * centered, axes, keepdims=True) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        y = xhat * gv + bv

        rm, rv = running_mean.copy(), running_var.copy()
        unbias = n / (n - 1) if n > 1 else 1.0
        for m_g, v_g in zip(mu.reshape(-1, C), var.reshape(-1, C)):
            rm = (1.0 - momentum) * rm + momentum * m_g
            rv = (1.0 - momentum) * rv + momentum * (v_g * unbias)

        def backward(g):
            g2 = g.reshape(-1, C)
            gx = None
            if x.requires_grad:
                gh = g * gv
                gx = (inv / n) * (
                    n * gh
                    - _rsum(gh, axes, keepdims=True)
                    - xhat * _rsum(gh * xhat, axes, keepdims=True)
                )
            return (
                gx,
                _colsum(g2 * xhat.reshape(-1, C)) if gamma.requires_grad else None,
                _colsum(g2) if beta.requires_grad else None,
            )

        return self._emit(nid, "batch_norm", (x, gamma, beta), y, backward), (rm, rv)

    # -- reverse pass ------------------------------------------------------
    def backward(
        self, loss: Tensor, params: Mapping[str, Tensor] | None = None
    ) -> dict[str, np.ndarray]:
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Returns gradients keyed by tensor name.  Every tensor in ``params``
        gets an entry; unreachable ones get zeros.
        """
        if loss.values.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        for key, leaf in self._leaves.items():
            if key in grads:
                leaf.grad = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
        if params is None:
            params = {t.name: t for t in self._leaves.values() if t.name is not None}
        out = {}
        for name, t in params.items():
            g = grads.get(id(t))
            if g is None and id(loss) == id(t):
                g = np.ones_like(t.values)
            out[name] = (
                np.zeros_like(t.values) if g is None
                else np.array(g, dtype=np.float64).reshape(t.shape)
            )
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is below the finite
    difference noise level (about 1e-11 for unit-scale losses) from
    dominating the report.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    checked: dict[str, int]
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tol}

    def __str__(self) -> str:
        lines = [f"{'parameter':<40} {'entries':>7} {'skipped':>7} {'max rel err':>12}"]
        for name, err in self.errors.items():
            flag = "" if err < self.tol else "  FAIL"
            lines.append(f"{name:<40} {self.checked[name]:>7} {self.skipped.get(name, 0):>7} "
                         f"{err:>12.3e}{flag}")
        lines.append(f"max relative error {self.max_error:.3e} (tol {self.tol:g})")
        return "\n".join(lines)


def check_gradients(
    fn: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    shrink_steps: int = 3,
) -> GradCheckReport:
    """Compare :meth:`Graph.backward` with central finite differences.

    The numeric derivative is the Richardson combination of central
    differences at ``epsilon`` and ``epsilon / 2``, accurate to O(eps^4).

    ``fn(graph, tensors)`` must build a scalar loss from the named tensors.
    With ``max_entries`` only that many randomly chosen coordinates of each
    parameter are perturbed.  The relative-error floor is at least the
    round-off level of the difference quotient divided by ``tol``.

    A difference quotient is only meaningful when both perturbed points sit
    on the same smooth piece as the unperturbed one.  When a relu, max or
    log floor changes branch the step is divided by 10, up to
    ``shrink_steps`` times; entries that still straddle a kink are left out
    and counted in ``report.skipped``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    graph = Graph(track_kinks=True)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
    loss = fn(graph, tensors)
    analytic = graph.backward(loss, tensors)
    base_kinks = graph.kinks
    # round-off of the loss is amplified by 1/eps; 100 ulps is a safety margin
    scale = 100.0 * np.finfo(np.float64).eps * max(1.0, abs(loss.item()))

    def loss_at():
        g = Graph(record=False, track_kinks=True)
        ts = {k: Tensor(v, name=k) for k, v in values.items()}
        return fn(g, ts).item(), g.kinks == base_kinks

    rng = rng or np.random.default_rng(0)
    errors, checked, skipped = {}, {}, {}
    for name, arr in values.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_all = analytic[name].reshape(-1)
        errs, n_skip = [], 0
        for i in coords:
            orig, eps = flat[i], epsilon
            for _ in range(shrink_steps + 1):
                quotients, smooth = [], True
                for h in (eps, eps / 2.0):
                    flat[i] = orig + h
                    up, same_up = loss_at()
                    flat[i] = orig - h
                    down, same_down = loss_at()
                    flat[i] = orig
                    smooth = smooth and same_up and same_down
                    quotients.append((up - down) / (2.0 * h))
                if smooth:
                    break
                eps /= 10.0
            else:
                n_skip += 1
                continue
            # Richardson: the h^2 error terms of the two quotients cancel
            numeric = (4.0 * quotients[1] - quotients[0]) / 3.0
            # entries below the round-off of this quotient are compared absolutely
            fl = max(floor, 3.0 * scale / eps / tol)
            errs.append(relative_error(a_all[i], numeric, fl))
        errors[name] = float(max(errs)) if errs else 0.0
        checked[name] = len(errs)
        skipped[name] = n_skip
    return GradCheckReport(errors, tol, checked, skipped)
