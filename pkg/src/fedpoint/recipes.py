"""Experiment recipes: the ablation grid, training-fraction runs and the
repeated stochastic evaluation harness."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fed_sim import FedConfig, RunResult, SiteData, evaluate_auc, run
from .metrics import spread
from .model import ModelConfig, ModelWeights
from .point_ops import PointSet
from .seeding import substream
from .synth import split, train_fraction

__all__ = [
    "MODES",
    "apply_mode",
    "SitePartition",
    "partition_sites",
    "site_aucs",
    "AblationResult",
    "ablation",
    "stability",
]

# mode -> (sampling, dda, federated)
MODES = {
    "base": ("fps", False, True),
    "fcs": ("fcs", False, True),
    "dda": ("fps", True, True),
    "ddafcs": ("fcs", True, True),
    "nofed": ("fps", False, False),
}


def apply_mode(mode: str, mcfg: ModelConfig, fcfg: FedConfig) -> tuple[ModelConfig, FedConfig]:
    """Model and training configs for one ablation mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    sampling, dda, federated = MODES[mode]
    return (dataclasses.replace(mcfg, sampling_mode=sampling),
            dataclasses.replace(fcfg, dda=dda, federated=federated))


@dataclass
class SitePartition:
    sites: list[SiteData]
    test: dict[str, list[PointSet]]


def partition_sites(data: dict[str, list[PointSet]], seed: int, fraction: float = 1.0) -> SitePartition:
    """Stratified 60/10/30 split of every site, optionally thinning the training part."""
    sites, test = [], {}
    for sid, slides in data.items():
        labels = [s.label for s in slides]
        sp = split(labels, seed=seed)
        train = sp.train if fraction == 1.0 else train_fraction(sp.train, labels, fraction, seed)
        sites.append(SiteData(sid, [slides[i] for i in train], [slides[i] for i in sp.val]))
        test[sid] = [slides[i] for i in sp.test]
    return SitePartition(sites, test)


def site_aucs(result: RunResult, mcfg: ModelConfig, test: dict[str, list[PointSet]],
              seed: int = 0, which: str = "best") -> dict[str, float]:
    """Per-site test AUC of the selected weights (server, or each site's own model)."""
    weights = result.best if which == "best" else result.final
    out = {}
    for i, (sid, slides) in enumerate(test.items()):
        w = weights[0] if result.federated else weights[i]
        out[sid] = evaluate_auc(w, mcfg, slides, seed=seed)
    return out


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class AblationResult:
    """Per-site test AUCs keyed by (mode, seed)."""

    aucs: dict[tuple[str, int], dict[str, float]] = field(default_factory=dict)
    seconds: float = 0.0
    weights: dict[tuple[str, int], list[ModelWeights]] = field(default_factory=dict)
    tests: dict[int, dict[str, list[PointSet]]] = field(default_factory=dict)

    def mean(self, mode: str, seed: int) -> float:
        return _mean(self.aucs[(mode, seed)].values())

    def seeds(self) -> list[int]:
        return sorted({s for _, s in self.aucs})

    def overall(self, mode: str) -> float:
        return _mean(self.mean(mode, s) for s in self.seeds() if (mode, s) in self.aucs)

    def count_leq(self, low: str, high: str) -> int:
        """Seeds on which mode ``low`` scores at most mode ``high``."""
        return sum(self.mean(low, s) <= self.mean(high, s) for s in self.seeds())

    def rows(self) -> list[dict]:
        return [{"mode": m, "seed": s, "site": sid, "auc": a}
                for (m, s), per in self.aucs.items() for sid, a in per.items()]


def ablation(data: dict[str, list[PointSet]], mcfg: ModelConfig, fcfg: FedConfig, modes, seeds,
             fraction: float = 1.0, log=None, keep=()) -> AblationResult:
    """Train every mode on every split seed and record per-site test AUC.

    The split seed doubles as the training seed, so modes sharing a seed
    start from the same initial weights.  Best weights of the ``(mode,
    seed)`` pairs listed in ``keep`` are retained together with the test
    slides of their split.
    """
    result = AblationResult()
    t0 = time.perf_counter()
    for seed in seeds:
        part = partition_sites(data, seed, fraction)
        for mode in modes:
            m, f = apply_mode(mode, mcfg, dataclasses.replace(fcfg, seed=seed))
            res = run(f, m, part.sites)
            result.aucs[(mode, seed)] = site_aucs(res, m, part.test, seed=seed)
            if (mode, seed) in keep:
                result.weights[(mode, seed)] = res.best
                result.tests[seed] = part.test
            if log is not None:
                log(mode, seed, result.aucs[(mode, seed)])
    result.seconds = time.perf_counter() - t0
    return result


def stability(weights: ModelWeights, mcfg: ModelConfig, slides, repeats: int = 100,
              seed: int = 0) -> tuple[list[float], dict[str, float]]:
    """AUC of ``repeats`` stochastic evaluations (random subsample and sampling start).

    ``slides`` is a list, or a ``{site: slides}`` mapping in which case each
    repeat reports the mean over sites with both classes present.
    """
    if repeats < 2:
        raise ValueError("need at least two repeats")
    groups = slides if isinstance(slides, dict) else {"": slides}
    aucs = []
    for r in range(repeats):
        rng = substream(seed, "eval", 10**6 + r)
        aucs.append(_mean(evaluate_auc(weights, mcfg, s, rng=rng) for s in groups.values()))
    return aucs, spread(aucs)
