"""Command-line entry point: ``fedpoint <command> [options]``.

Exit status is 0 on success, 1 when inputs fail validation and 2 when a
run fails (including a failing gradient check).  ``FEDPOINT_SEED``
overrides the seed from the config file; ``--seed`` overrides both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TRAIN_FRACTIONS, ConfigError, RunConfig, load_config
from .fed_sim import evaluate_auc, run
from .metrics import EvalReport, spread
from .point_ops import default_start, farthest_sample
from .recipes import MODES, apply_mode, partition_sites
from .seeding import substream
from .synth import DatasetFormatError, generate_sites, label_counts, minority_slide, read_dataset, write_dataset

__all__ = ["main", "build_parser"]

SEED_ENV = "FEDPOINT_SEED"


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -- shared helpers ---------------------------------------------------------

def _env_seed() -> int | None:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={env!r} is not an integer") from None


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig().validate()
    seed = cfg.seed
    if _env_seed() is not None:
        seed = _env_seed()
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    return cfg.with_seed(seed)


def _prepare_out(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _fmt(v) -> str:
    return "N/A" if isinstance(v, float) and math.isnan(v) else (f"{v:.4f}" if isinstance(v, float) else str(v))


def write_history(path: Path, history: list[dict], flags: dict):
    """History rows preceded by ``# key=value`` lines echoing every flag."""
    keys = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with path.open("w", newline="") as fh:
        for k, v in flags.items():
            fh.write(f"# {k}={v}\n")
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: ("N/A" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})


# -- generate ------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else cfg.data_dir
    if out is None:
        raise ValidationError("no output directory: pass --out or set data_dir in the config")
    _prepare_out(out, args.force)
    data = generate_sites(cfg.sites, cfg.seed)
    meta = {s.site_id: {"target_gamma": s.gamma, "unseen": s.site_id in cfg.unseen, "seed": cfg.seed}
            for s in cfg.sites}
    write_dataset(out, data, meta)
    print(f"{'site':<6}{'slides':>8}{'neg':>6}{'pos':>6}{'gamma':>8}{'target':>8}")
    for spec in cfg.sites:
        neg, pos = label_counts(spec.n_slides, spec.gamma)
        tag = "  (unseen)" if spec.site_id in cfg.unseen else ""
        print(f"{spec.site_id:<6}{spec.n_slides:>8}{neg:>6}{pos:>6}{neg / pos:>8.3f}{spec.gamma:>8.2f}{tag}")
    print(f"wrote {len(data)} sites to {out}")
    return 0


# -- train ---------------------------------------------------------------

def _train_config(args) -> RunConfig:
    cfg = _load(args)
    if args.data:
        cfg.data_dir = Path(args.data)
    if args.out:
        cfg.out_dir = Path(args.out)
    if args.train_fraction is not None:
        cfg.train_fraction = args.train_fraction
    if args.mode is not None:
        cfg.mode = args.mode
    train = cfg.train
    if args.epochs is not None:
        train = dataclasses.replace(train, K=args.epochs)
    if args.pace is not None:
        train = dataclasses.replace(train, E=args.pace)
    if args.lr is not None:
        train = dataclasses.replace(train, lr=args.lr)
    cfg.train = train
    if cfg.mode is not None:
        cfg.model, cfg.train = apply_mode(cfg.mode, cfg.model, cfg.train)
    if cfg.out_dir is None:
        raise ValidationError("no output directory: pass --out or set out_dir in the config")
    return cfg.validate(need_data=True)


def _load_sites(cfg: RunConfig, site_ids, d_in: int):
    found = read_dataset(cfg.data_dir)
    missing = [s for s in site_ids if s not in found]
    if missing:
        raise ValidationError(f"dataset {cfg.data_dir} has no site(s) {missing}")
    data = {}
    for sid in site_ids:
        ds = found[sid]
        if ds.slides[0].d != d_in:
            raise ValidationError(f"site {sid} has feature dim {ds.slides[0].d}, model expects {d_in}")
        data[sid] = ds.slides
    return data, found


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data, _ = _load_sites(cfg, cfg.federated_sites(), cfg.model.d_in)
    _prepare_out(cfg.out_dir, args.force)
    part = partition_sites(data, cfg.seed, cfg.train_fraction)
    mode = cfg.mode or ("base" if cfg.train.federated else "nofed")
    flags = {
        "command": "train", "config": args.config or "", "data": cfg.data_dir, "out": cfg.out_dir,
        "mode": mode, "seed": cfg.seed, "epochs": cfg.train.K, "pace": cfg.train.E, "lr": cfg.train.lr,
        "dda": cfg.train.dda, "federated": cfg.train.federated, "sampling": cfg.model.sampling_mode,
        "position": cfg.model.position_mode, "train_fraction": cfg.train_fraction,
        "n_points": cfg.model.n_points, "stage_dims": " ".join(map(str, cfg.model.stage_dims)),
        "sites": " ".join(cfg.federated_sites()),
    }

    def log(k, history):
        if args.verbose:
            rows = [r for r in history if r["epoch"] == k]
            print(f"epoch {k}: " + " ".join(f"{r['site']}={_fmt(r['val_auc'])}" for r in rows), flush=True)

    res = run(cfg.train, cfg.model, part.sites, log=log)
    write_history(cfg.out_dir / "history.csv", res.history, flags)
    meta = {"mode": mode, "split_seed": cfg.seed, "train_fraction": cfg.train_fraction,
            "sites": cfg.federated_sites(), "federated": res.federated, "n_syncs": res.n_syncs}
    rng_states = {s.site_id: {"sampling": s.rng.bit_generator.state, "dda": s.dda_rng.bit_generator.state}
                  for s in res.sites}
    if res.federated:
        ckpts = {"checkpoint.fpck": (res.best[0], res.best_epoch[0], res.best_val_auc[0], None)}
    else:
        ckpts = {f"checkpoint_{s.site_id}.fpck": (w, e, a, s.site_id)
                 for s, w, e, a in zip(res.sites, res.best, res.best_epoch, res.best_val_auc)}
    for name, (w, epoch, val, site) in ckpts.items():
        m = dict(meta, best_val_auc=None if math.isnan(val) else val)
        if site is not None:
            m["site"] = site
        save_checkpoint(cfg.out_dir / name, Checkpoint(w, cfg.model, epoch, rng_states, m))
        print(f"{name}: best epoch {epoch}, validation AUC {_fmt(val)}")
    print(f"{res.n_syncs} aggregation events; history in {cfg.out_dir / 'history.csv'}")
    return 0


# -- eval ----------------------------------------------------------------

def _checkpoint_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.fpck")))
        elif p.is_file():
            paths.append(p)
        else:
            raise ValidationError(f"checkpoint {p} not found")
    if not paths:
        raise ValidationError("no checkpoints found")
    return paths


def cmd_eval(args) -> int:
    if args.repeats is not None and args.repeats < 2:
        raise ValidationError("--repeats needs at least 2")
    ckpts = [load_checkpoint(p) for p in _checkpoint_paths(args.checkpoint)]
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise ValidationError(f"data directory {data_dir} does not exist")
    found = read_dataset(data_dir)
    seed = args.seed if args.seed is not None else _env_seed()

    # (site, split, slides, checkpoint)
    jobs = []
    for ck in ckpts:
        trained = list(ck.meta.get("sites", []))
        split_seed = seed if seed is not None else int(ck.meta.get("split_seed", 0))
        own = [ck.meta["site"]] if "site" in ck.meta else trained
        for sid in own:
            if sid not in found:
                raise ValidationError(f"dataset has no site {sid!r} used in training")
            slides = found[sid].slides
            test = partition_sites({sid: slides}, split_seed).test[sid]
            jobs.append((sid, "test", test, ck, split_seed))
        if "site" not in ck.meta:
            for sid, ds in found.items():
                if sid not in trained:
                    jobs.append((sid, "unseen", ds.slides, ck, split_seed))
    for sid, _, slides, ck, _ in jobs:
        if slides and slides[0].d != ck.model_config.d_in:
            raise ValidationError(f"site {sid} has feature dim {slides[0].d}, checkpoint expects "
                                  f"{ck.model_config.d_in}")

    report = EvalReport()
    for sid, split_name, slides, ck, split_seed in jobs:
        a = evaluate_auc(ck.weights, ck.model_config, slides, seed=split_seed)
        report.add(sid, a, split_name)
    print(f"{'site':<6}{'split':<8}{'slides':>7}{'auc':>9}")
    for sid, split_name, slides, _, _ in jobs:
        print(f"{sid:<6}{split_name:<8}{len(slides):>7}{_fmt(report.site_auc[sid][0]):>9}")
    test_mean = _mean([report.site_auc[s][0] for s, sp, *_ in jobs if sp == "test"])
    print(f"mean test AUC {_fmt(test_mean)}")

    if args.repeats:
        runs = []
        for r in range(args.repeats):
            per = []
            for sid, split_name, slides, ck, split_seed in jobs:
                rng = substream(split_seed, "eval", 10**6 + r)
                a = evaluate_auc(ck.weights, ck.model_config, slides, rng=rng)
                report.add(sid, a, split_name)
                if split_name == "test":
                    per.append(a)
            runs.append(_mean(per))
        valid = [v for v in runs if not math.isnan(v)]
        if len(valid) >= 2:
            st = spread(valid)
            print(f"{args.repeats} stochastic repeats of mean test AUC: "
                  + " ".join(f"{k}={v:.4f}" for k, v in st.items()))
        else:
            print("stochastic repeats: N/A (no test site with both classes)")
    if args.report:
        report.to_csv(args.report)
        print(f"report written to {args.report}")
    return 0


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


# -- gradcheck -----------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results, seconds = run_suite(seed=args.seed if args.seed is not None else (_env_seed() or 0), include_model=not args.skip_model,
                                 model_entries=args.entries)
    ok = True
    for name, rep in results:
        status = "ok" if rep.passed else "FAIL"
        ok &= rep.passed
        skipped = sum(rep.skipped.values())
        extra = f" ({skipped} entries skipped at kinks)" if skipped else ""
        print(f"{name:<28} max rel err {rep.max_error:.3e}  {status}{extra}")
        if args.verbose or not rep.passed:
            print(rep)
    print(f"{'all passed' if ok else 'FAILED'} in {seconds:.1f}s")
    return 0 if ok else 2


# -- sampledemo ----------------------------------------------------------

def cmd_sampledemo(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    if args.n < 1:
        raise ValidationError("--n must be positive")
    minority = None
    if args.data:
        found = read_dataset(args.data, [args.site] if args.site else None)
        site = args.site or sorted(found)[0]
        slides = found[site].slides
        if not 0 <= args.index < len(slides):
            raise ValidationError(f"slide index {args.index} out of range for site {site}")
        slide = slides[args.index]
    else:
        slide, minority = minority_slide(args.n, args.dim, substream(seed, "data", 99))
    if slide.n > args.n:
        keep = substream(seed, "sampling", 99).choice(slide.n, size=args.n, replace=False)
        slide = slide.take(keep)
        minority = minority[keep] if minority is not None else None
    m = args.m if args.m is not None else max(1, slide.n // 4)
    if not 1 <= m <= slide.n:
        raise ValidationError(f"--m must lie in [1, {slide.n}]")
    start = int(default_start(slide.features))
    order_fps = farthest_sample(slide.coords[None], m, start, "euclidean")[0]
    order_fcs = farthest_sample(slide.features[None], m, start, "cosine")[0]
    rank_fps = np.full(slide.n, -1)
    rank_fps[order_fps] = np.arange(m)
    rank_fcs = np.full(slide.n, -1)
    rank_fcs[order_fcs] = np.arange(m)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["point", "x", "y", "minority", "fps_rank", "fcs_rank"])
        for i in range(slide.n):
            mi = "" if minority is None else int(minority[i])
            w.writerow([i, repr(slide.coords[i, 0]), repr(slide.coords[i, 1]), mi, rank_fps[i], rank_fcs[i]])
    finally:
        if args.out:
            out.close()
    if minority is not None:
        print(f"minority points selected: FPS {int(minority[order_fps].sum())}, "
              f"FCS {int(minority[order_fcs].sum())} of m={m}", file=sys.stderr)
    return 0


# -- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedpoint", description="Federated point-transformer slide classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic multi-site data")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train with federated averaging or per-site")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=sorted(MODES))
    t.add_argument("--pace", type=int, help="local epochs between aggregations")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-fraction", type=float, choices=TRAIN_FRACTIONS)
    t.add_argument("--force", action="store_true")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-site test AUC of checkpoints")
    e.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or training output dirs")
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, help="split seed (default: the one stored in the checkpoint)")
    e.add_argument("--repeats", type=int)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the model")
    c.add_argument("--seed", type=int)
    c.add_argument("--entries", type=int, default=8, help="coordinates checked per model tensor")
    c.add_argument("--skip-model", action="store_true")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sampledemo", help="CSV of FPS and FCS selections on one slide")
    s.add_argument("--data")
    s.add_argument("--site")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--m", type=int)
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sampledemo)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValidationError, ConfigError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
