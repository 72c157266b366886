"""``savae`` command line: gen-data, train, eval, ablate, gradcheck.

Every command writes into a fresh run directory ``<out_dir>/<run id>`` where the
run id is ``<command>-seed<seed>-<config digest prefix>`` (plus ``-N`` if that
directory already exists). Exit codes: 0 success, 1 runtime failure, 2 usage,
configuration or input-data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config, resolve_seed
from .data import (
    Dataset,
    SyntheticSpec,
    gen_synthetic,
    load_dataset,
    save_dataset,
    save_ground_truth,
    select_features,
    StandardizationStats,
)
from .errors import ConfigError, DataError, DomainError, SavaeError, ShapeError, TrainingError
from .evaluation import AblationTable, GroupMetrics, group_breakdown, run_ablation
from .networks import VARIANTS, predict
from .training import fit
from .verify import run_gradcheck_suite

log = logging.getLogger("savae")

GRADCHECK_TOL = 1e-4
_USER_ERRORS = (ConfigError, DataError, ShapeError, DomainError, FileNotFoundError)


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run directories and reports


def make_run_dir(out_dir, command: str, seed: int, digest: str) -> tuple[str, Path]:
    """Create a new run directory; never reuses an existing one."""
    base = f"{command}-seed{seed}-{digest[:8]}"
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for i in range(10_000):
            run_id = base if i == 0 else f"{base}-{i}"
            path = root / run_id
            try:
                path.mkdir()
            except FileExistsError:
                continue
            return run_id, path
    except OSError as exc:
        raise ConfigError(f"output directory {root} is not writable: {exc.strerror}") from None
    raise ConfigError(f"too many runs named {base} in {root}")


def _echo_config(run_dir: Path, run_id: str, config_bytes: bytes) -> Path:
    path = run_dir / f"{run_id}.config.ini"
    path.write_bytes(config_bytes)
    return path


def write_report(results, run_dir, run_id: str, seed: int, cfg: RunConfig,
                 config_bytes: bytes, kind: str = "ablation") -> dict[str, Path]:
    """Write the machine-readable report, a human table and the config echo.

    ``results`` is an :class:`AblationTable` or a :class:`GroupMetrics`. The JSON
    report holds no run id or timestamp, so identical runs give identical bytes.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"report directory {run_dir} does not exist")
    if isinstance(results, AblationTable):
        body, table = results.to_dict(), results.format()
    elif isinstance(results, GroupMetrics):
        body, table = results.to_dict(), _format_groups(results)
    else:
        raise TypeError(f"cannot report {type(results).__name__}")
    doc = {
        "kind": kind,
        "version": __version__,
        "seed": seed,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "results": body,
    }
    header = f"# {kind}  seed={seed}  config={cfg.digest()[:16]}  version={__version__}\n"
    paths = {
        "report": run_dir / f"{run_id}.report.json",
        "table": run_dir / f"{run_id}.table.txt",
    }
    try:
        paths["report"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths["table"].write_text(header + table)
        paths["config"] = _echo_config(run_dir, run_id, config_bytes)
    except OSError as exc:
        raise ConfigError(f"cannot write report to {run_dir}: {exc.strerror}") from None
    return paths


def read_report(path) -> tuple[dict, AblationTable | GroupMetrics]:
    """Load a report written by :func:`write_report`; returns ``(document, results)``."""
    doc = json.loads(Path(path).read_text())
    if doc["kind"] == "ablation":
        return doc, AblationTable.from_dict(doc["results"])
    return doc, GroupMetrics.from_dict(doc["results"])


def _format_groups(g: GroupMetrics) -> str:
    rows = [("overall", g.overall), ("male", g.male), ("female", g.female)]
    rows += list(g.groups.items())
    lines = [f"{'group':<8} {'n':>6} {'MAE':>8} {'sd':>7} {'RMSE':>8} {'R2':>8}"]
    for name, m in rows:
        if m is None:
            lines.append(f"{name:<8} {0:>6} {'-':>8} {'-':>7} {'-':>8} {'-':>8}")
            continue
        r2 = "-" if m.r2 is None else f"{m.r2:.3f}"
        lines.append(f"{name:<8} {m.n:>6} {m.mae:>8.3f} {m.mae_std:>7.3f} {m.rmse:>8.3f} {r2:>8}")
    lines.append(f"unbinned (age >= 55): {g.unbinned}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared plumbing


def _load_run_config(args) -> tuple[RunConfig, bytes]:
    if args.config:
        cfg, raw = load_config(args.config)
    else:
        cfg, raw = RunConfig(), None
    cfg.seed = resolve_seed(args.seed, cfg)
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg, raw


def _config_bytes(cfg: RunConfig, raw: bytes | None) -> bytes:
    return raw if raw is not None else dump_config(cfg).encode()


def _dataset(cfg: RunConfig) -> Dataset:
    cfg.validate()
    if cfg.data_path is not None:
        return load_dataset(cfg.data_path)
    return gen_synthetic(cfg.synthetic)[0]


def _apply_data_flag(args, cfg: RunConfig):
    if getattr(args, "data", None):
        cfg.data_path = args.data
        cfg.synthetic = None


def _apply_train_flags(args, cfg: RunConfig):
    changes = {}
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "max_epochs", None) is not None:
        changes["max_epochs"] = args.max_epochs
    if changes:
        cfg.train = replace(cfg.train, **changes)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg, raw = _load_run_config(args)
    spec = cfg.synthetic or SyntheticSpec()
    changes = {"seed": cfg.seed}
    if args.n is not None:
        changes["n"] = args.n
    if args.noise_std is not None:
        changes["noise_std"] = args.noise_std
    if args.unimodal:
        changes["multimodal"] = False
    spec = replace(spec, **changes)
    spec.validate()
    cfg.synthetic, cfg.data_path = spec, None
    run_id, run_dir = make_run_dir(cfg.out_dir, "gen-data", cfg.seed, cfg.digest())
    ds, truth = gen_synthetic(spec)
    data_path = save_dataset(ds, run_dir / f"{run_id}.data.csv")
    save_ground_truth(truth, spec, run_dir / f"{run_id}.truth.npz")
    _echo_config(run_dir, run_id, _config_bytes(cfg, raw))
    print(data_path)
    return 0


def cmd_train(args) -> int:
    cfg, raw = _load_run_config(args)
    _apply_data_flag(args, cfg)
    _apply_train_flags(args, cfg)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    ds = _dataset(cfg)
    multimodal = cfg.train.mode == "multimodal"
    if not multimodal:
        ds = ds.unimodal()
    raw_dims = (ds.m1, ds.m2)
    mask = None
    if cfg.prep.n_features is not None:
        m2 = cfg.prep.n_features if cfg.prep.n_features2 is None else cfg.prep.n_features2
        mask = select_features(ds, cfg.prep.n_features, cfg.prep.scorer,
                               m2=m2 if ds.multimodal else None, seed=cfg.seed)
        ds = mask.apply(ds)
    stats = StandardizationStats.fit(ds)
    ds = stats.transform(ds)

    digest = cfg.digest()
    run_id, run_dir = make_run_dir(cfg.out_dir, "train", cfg.seed, digest)
    bundle, history = fit(ds, cfg.train)
    meta = {"seed": cfg.seed, "config_digest": digest, "version": __version__,
            "best_epoch": history.best_epoch, "stop_reason": history.stop_reason}
    ckpt = save_checkpoint(run_dir / f"{run_id}.ckpt.npz", bundle, stats, mask, meta, raw_dims)
    head = json.dumps({"seed": cfg.seed, "config_digest": digest, "version": __version__,
                       "variant": cfg.train.variant, "mode": cfg.train.mode,
                       "best_epoch": history.best_epoch, "stop_reason": history.stop_reason},
                      sort_keys=True)
    (run_dir / f"{run_id}.history.jsonl").write_text(head + "\n" + history.to_jsonl())
    _echo_config(run_dir, run_id, _config_bytes(cfg, raw))
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    cfg, raw = _load_run_config(args)
    _apply_data_flag(args, cfg)
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset(cfg)
    bundle = ckpt.bundle
    if bundle.arch.unimodal:
        ds = ds.unimodal()
    raw_m1, raw_m2 = ckpt.raw_dims
    if raw_m1 is not None and ds.m1 != raw_m1:
        raise ShapeError(f"checkpoint expects {raw_m1} modality-1 features, dataset has {ds.m1}")
    if not bundle.arch.unimodal:
        if not ds.multimodal:
            raise ShapeError("checkpoint is multimodal but the dataset has no modality-2 features")
        if raw_m2 is not None and ds.m2 != raw_m2:
            raise ShapeError(f"checkpoint expects {raw_m2} modality-2 features, dataset has {ds.m2}")
    if ckpt.mask is not None:
        ds = ckpt.mask.apply(ds)
    if ckpt.stats is not None:
        ds = ckpt.stats.transform(ds)
    y_hat = predict(bundle, ds.x1, None if bundle.arch.unimodal else ds.x2, ds.sex)
    metrics = group_breakdown(ds, y_hat)
    run_id, run_dir = make_run_dir(cfg.out_dir, "eval", cfg.seed, cfg.digest())
    paths = write_report(metrics, run_dir, run_id, cfg.seed, cfg, _config_bytes(cfg, raw), kind="eval")
    print(_format_groups(metrics), end="")
    print(paths["report"])
    return 0


def cmd_ablate(args) -> int:
    cfg, raw = _load_run_config(args)
    _apply_data_flag(args, cfg)
    _apply_train_flags(args, cfg)
    if args.variants:
        cfg.variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    if args.k is not None:
        cfg.k = args.k
    if args.seeds:
        cfg.seeds = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.max_folds is not None:
        cfg.max_folds = args.max_folds
    ds = _dataset(cfg)
    if cfg.train.mode == "unimodal":
        ds = ds.unimodal()
    table = run_ablation(ds, cfg.variants, cfg.train, k=cfg.k, seeds=cfg.seeds, prep=cfg.prep,
                         max_folds=cfg.max_folds, jobs=cfg.jobs)
    run_id, run_dir = make_run_dir(cfg.out_dir, "ablate", cfg.seed, cfg.digest())
    paths = write_report(table, run_dir, run_id, cfg.seed, cfg, _config_bytes(cfg, raw))
    print(table.format(), end="")
    print(paths["report"])
    return 0


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args.seed, RunConfig())
    res = run_gradcheck_suite(seed, n_points=args.points, per_tensor=args.per_tensor)
    ok = res["max_rel_err"] < GRADCHECK_TOL
    print(f"max relative error {res['max_rel_err']:.3e} over {res['points']} points "
          f"(generator {res['generator']:.3e}, discriminator {res['discriminator']:.3e}): "
          f"{'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="savae", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"savae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="config file (INI)")
        sp.add_argument("--seed", type=int, help="run seed (overrides config and SAVAE_SEED)")
        sp.add_argument("--out-dir", dest="out_dir", help="parent directory for the run directory")
        if data:
            sp.add_argument("--data", help="dataset CSV (overrides the config's data source)")

    def training(sp):
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--mode", choices=("multimodal", "unimodal"))
        sp.add_argument("--max-epochs", dest="max_epochs", type=int)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and its ground truth")
    common(g, data=False)
    g.add_argument("--n", type=int)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.add_argument("--unimodal", action="store_true", help="omit modality-2 features")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit one model and save a checkpoint and history")
    common(t)
    training(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="cross-validate several variants on identical folds")
    common(a)
    training(a)
    a.add_argument("--variants", help="comma-separated variant names")
    a.add_argument("--k", type=int)
    a.add_argument("--seeds", help="comma-separated seeds")
    a.add_argument("--jobs", type=int)
    a.add_argument("--max-folds", dest="max_folds", type=int)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="check autodiff against finite differences")
    c.add_argument("--seed", type=int)
    c.add_argument("--points", type=int, default=100)
    c.add_argument("--per-tensor", dest="per_tensor", type=int, default=2)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (TrainingError, SavaeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # last resort: still no stack dump for the user
        print(f"internal error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
