"""Run configuration: an INI-style key=value file with sections.

```
[model]
n_points = 1024
d_in = 32
stage_dims = 32, 64, 128, 256, 512
sampling = fcs

[train]
epochs = 200
pace = 1
dda = true

[site A]
n_slides = 98
gamma = 5.7
```

Unknown sections or keys are rejected so that typos do not silently fall
back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .fed_sim import FedConfig
from .model import POSITION_MODES, SAMPLING_MODES, ModelConfig
from .recipes import MODES
from .synth import DEFAULT_SITES, UNSEEN_SITES, SiteSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "TRAIN_FRACTIONS", "POINTS_MULTIPLE"]

TRAIN_FRACTIONS = (1.0, 0.75, 0.5, 0.25)
POINTS_MULTIPLE = 256  # four 4x down-sampling stages


class ConfigError(ValueError):
    pass


def _default_sites() -> tuple[SiteSpec, ...]:
    return DEFAULT_SITES + UNSEEN_SITES


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: FedConfig = field(default_factory=FedConfig)
    sites: tuple[SiteSpec, ...] = field(default_factory=_default_sites)
    unseen: tuple[str, ...] = tuple(s.site_id for s in UNSEEN_SITES)
    mode: str | None = None
    train_fraction: float = 1.0
    data_dir: Path | None = None
    out_dir: Path | None = None
    seed: int = 0

    def validate(self, need_data: bool = False) -> "RunConfig":
        if self.model.n_points % POINTS_MULTIPLE:
            raise ConfigError(f"n_points={self.model.n_points} must be divisible by {POINTS_MULTIPLE}")
        if self.train_fraction not in TRAIN_FRACTIONS:
            raise ConfigError(f"train_fraction must be one of {TRAIN_FRACTIONS}")
        if self.mode is not None and self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        ids = [s.site_id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ConfigError("site ids must be unique")
        missing = set(self.unseen) - set(ids)
        if missing:
            raise ConfigError(f"unseen sites {sorted(missing)} are not defined")
        if not self.federated_sites():
            raise ConfigError("no federated sites left after removing unseen ones")
        bad = [s.site_id for s in self.sites if s.d != self.model.d_in]
        if bad:
            raise ConfigError(f"sites {bad} have feature dim != d_in={self.model.d_in}")
        if need_data and (self.data_dir is None or not Path(self.data_dir).is_dir()):
            raise ConfigError(f"data directory {self.data_dir} does not exist")
        return self

    def federated_sites(self) -> list[str]:
        return [s.site_id for s in self.sites if s.site_id not in self.unseen]

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


_MODEL_KEYS = {
    "n_points": int, "d_in": int, "k_neighbors": int, "head_dim": int, "query_layers": int,
    "sampling": str, "position": str, "attention": str, "stage_dims": "ints",
}
_TRAIN_KEYS = {
    "epochs": int, "pace": int, "lr": float, "weight_decay": float, "warmup_epochs": int,
    "batch_size": int, "dda": bool, "federated": bool, "mode": str, "train_fraction": float,
    "eval_batch": int,
}
_SITE_KEYS = {
    "n_slides": int, "gamma": float, "n_points_min": int, "n_points_max": int,
    "signal_strength": float, "shift_scale": float, "clusters_min": int, "clusters_max": int,
    "cluster_radius": float, "noise_sigma": float, "unseen": bool,
}


def _get(sec: configparser.SectionProxy, key: str, kind):
    try:
        if kind is bool:
            return sec.getboolean(key)
        if kind == "ints":
            return tuple(int(v) for v in sec[key].replace(",", " ").split())
        return kind(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: {exc}") from None


def _check_keys(sec, allowed):
    extra = set(sec.keys()) - set(allowed)
    if extra:
        raise ConfigError(f"[{sec.name}] unknown keys: {', '.join(sorted(extra))}")


def load_config(path, *, base_dir=None) -> RunConfig:
    """Parse a config file; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    base_dir = Path(base_dir) if base_dir is not None else path.parent
    cfg = RunConfig()
    model_kw, train_kw = {}, {}

    for name in cp.sections():
        sec = cp[name]
        if name == "model":
            _check_keys(sec, _MODEL_KEYS)
            vals = {k: _get(sec, k, t) for k, t in _MODEL_KEYS.items() if k in sec}
            if "sampling" in vals:
                vals["sampling_mode"] = vals.pop("sampling")
            if "position" in vals:
                vals["position_mode"] = vals.pop("position")
            model_kw.update(vals)
        elif name == "train":
            _check_keys(sec, _TRAIN_KEYS)
            vals = {k: _get(sec, k, t) for k, t in _TRAIN_KEYS.items() if k in sec}
            if "mode" in vals:
                cfg.mode = vals.pop("mode")
            if "train_fraction" in vals:
                cfg.train_fraction = vals.pop("train_fraction")
            if "epochs" in vals:
                vals["K"] = vals.pop("epochs")
            if "pace" in vals:
                vals["E"] = vals.pop("pace")
            train_kw.update(vals)
        elif name == "run":
            _check_keys(sec, {"seed", "data_dir", "out_dir"})
            if "seed" in sec:
                cfg.seed = _get(sec, "seed", int)
            for key in ("data_dir", "out_dir"):
                if key in sec:
                    setattr(cfg, key, base_dir / sec[key])
        elif name.startswith("site "):
            continue
        else:
            raise ConfigError(f"unknown section [{name}]")

    if model_kw.get("sampling_mode", "fcs") not in SAMPLING_MODES:
        raise ConfigError(f"sampling must be one of {SAMPLING_MODES}")
    if model_kw.get("position_mode", "real") not in POSITION_MODES:
        raise ConfigError(f"position must be one of {POSITION_MODES}")
    try:
        cfg.model = ModelConfig(**model_kw)
        cfg.train = FedConfig(**train_kw, seed=cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    site_secs = [n for n in cp.sections() if n.startswith("site ")]
    if site_secs:
        sites, unseen = [], []
        for name in site_secs:
            sec = cp[name]
            _check_keys(sec, _SITE_KEYS)
            sid = name[5:].strip()
            if not sid:
                raise ConfigError(f"[{name}] needs a site id")
            v = {k: _get(sec, k, t) for k, t in _SITE_KEYS.items() if k in sec}
            if "n_slides" not in v or "gamma" not in v:
                raise ConfigError(f"[{name}] needs n_slides and gamma")
            kw = {"n_slides": v["n_slides"], "gamma": v["gamma"]}
            if "n_points_min" in v or "n_points_max" in v:
                kw["n_points_range"] = (v.get("n_points_min", 1200), v.get("n_points_max", 4000))
            if "clusters_min" in v or "clusters_max" in v:
                kw["n_positive_clusters_range"] = (v.get("clusters_min", 1), v.get("clusters_max", 3))
            for k in ("signal_strength", "shift_scale", "cluster_radius", "noise_sigma"):
                if k in v:
                    kw[k] = v[k]
            try:
                sites.append(SiteSpec(sid, d=cfg.model.d_in, **kw))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
            if v.get("unseen", False):
                unseen.append(sid)
        cfg.sites, cfg.unseen = tuple(sites), tuple(unseen)
    else:
        cfg.sites = tuple(s.with_dim(cfg.model.d_in) for s in _default_sites())
    return cfg.validate()
