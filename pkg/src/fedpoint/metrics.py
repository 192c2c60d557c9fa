"""ROC-AUC, repeat statistics and report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

__all__ = ["auc", "repeat_stats", "spread", "EvalReport"]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks: P(s+ > s-) + P(s+ == s-) / 2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    pos = int((y == 1).sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def repeat_stats(aucs) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation."""
    a = np.asarray(aucs, dtype=np.float64).reshape(-1)
    if a.size < 2:
        raise ValueError("need at least two values")
    return float(a.mean()), float(a.std(ddof=1))


def spread(aucs) -> dict[str, float]:
    """Mean, std, min, max and max-min of repeated evaluations."""
    mean, std = repeat_stats(aucs)
    a = np.asarray(aucs, dtype=np.float64)
    return {"mean": mean, "std": std, "min": float(a.min()), "max": float(a.max()),
            "max_min": float(a.max() - a.min())}


@dataclass
class EvalReport:
    """Per-site AUCs for one or more runs (split repeats or stochastic repeats)."""

    site_auc: dict[str, list[float]] = field(default_factory=dict)
    split: dict[str, str] = field(default_factory=dict)
    scores: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def add(self, site: str, value: float, split: str = "test", scores=None):
        self.site_auc.setdefault(site, []).append(float(value))
        self.split[site] = split
        if scores is not None:
            self.scores.setdefault(site, []).append(np.asarray(scores))

    def mean_auc(self, run: int = 0) -> float:
        """Mean over sites of run ``run``; sites without a defined AUC are skipped."""
        vals = [v[run] for v in self.site_auc.values() if run < len(v) and not math.isnan(v[run])]
        return float(np.mean(vals)) if vals else math.nan

    def per_run_means(self) -> list[float]:
        n = max((len(v) for v in self.site_auc.values()), default=0)
        return [self.mean_auc(i) for i in range(n)]

    def summary(self) -> dict[str, float]:
        means = [m for m in self.per_run_means() if not math.isnan(m)]
        if len(means) >= 2:
            return spread(means)
        return {"mean": means[0] if means else math.nan}

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "split", "run", "auc"])
            for site, vals in self.site_auc.items():
                for i, v in enumerate(vals):
                    w.writerow([site, self.split.get(site, ""), i, "N/A" if math.isnan(v) else repr(v)])
