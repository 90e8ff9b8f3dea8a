"""Command-line entry point: ``glmnet {gen,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 2 usage or incompatible inputs, 3 numerical abort,
4 I/O or file-format failure. ``GLM_LOG`` selects quiet, info or debug logging.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .convembed import init_params
from .datasynth import (
    DEFAULT_DEFORM,
    GraphPair,
    SynthConfig,
    batch_split,
    generate_dataset,
    knn_support,
    load_features,
    save_features,
)
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ContractError,
    DatasetFormatError,
    DimensionError,
    GLMError,
    InvariantError,
    NonFiniteError,
)
from .trainer import TrainState, evaluate, forward_sample, load_checkpoint, save_checkpoint, train

log = logging.getLogger("glmnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

CONFIG_HELP = """\
config file: one key=value per line, '#' starts a comment. Keys are
TrainConfig fields, e.g.
  gamma=0.5
  gamma_sharp=0.75
  lam=0.1
  widths=64,64,64
  sinkhorn_iters=20
  learn_rate=0.001
  epochs=50
  graph_learning=true
A run manifest (JSON) is accepted as well; its "config" entry is used.
Precedence: command-line flags > config file > defaults.
"""

# published ablation accuracies (%) on PASCAL VOC, shown next to ours
ABLATION_VARIANTS = [
    ("full", dict(graph_learning=True, constraint_loss=True, sharpening=True), 67.5),
    ("no-sharpening", dict(graph_learning=True, constraint_loss=True, sharpening=False), 66.9),
    ("no-sharpening-no-constraint", dict(graph_learning=True, constraint_loss=False, sharpening=False), 66.6),
    ("baseline", dict(graph_learning=False, constraint_loss=False, sharpening=False), 63.8),
]


class UsageError(GLMError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(name: str, raw):
    if not isinstance(raw, str):
        return raw
    if name in ("widths", "betas"):
        kind = int if name == "widths" else float
        return tuple(kind(v) for v in raw.split(","))
    if name in ("delta", "delta_p"):
        return None if raw.lower() in ("", "none") else float(raw)
    default = TrainConfig.__dataclass_fields__[name].default
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        obj = json.loads(text)
        return dict(obj.get("config", obj))
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _convert(key, value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve_config(args, base: Optional[dict] = None) -> TrainConfig:
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    flag_map = {
        "seed": "seed", "epochs": "epochs", "lr": "learn_rate", "lam": "lam",
        "gamma": "gamma", "gamma_sharp": "gamma_sharp", "widths": "widths",
        "sinkhorn_iters": "sinkhorn_iters", "batch_size": "batch_size",
        "delta": "delta", "delta_p": "delta_p",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = _convert(key, v) if isinstance(v, str) else v
    for flag, key in (("no_graph_learning", "graph_learning"), ("no_sharpening", "sharpening"),
                      ("no_constraint_loss", "constraint_loss")):
        if getattr(args, flag, False):
            values[key] = False
    try:
        return TrainConfig.from_dict(values)
    except (ContractError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# manifest and metric emission


class Manifest:
    def __init__(self, command: str, argv: Sequence[str]):
        self.data = {
            "command": command,
            "argv": list(argv),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "config": None,
            "seed": None,
            "outputs": {},
            "metrics": [],
        }

    def finish(self, path: Optional[Path]) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        text = json.dumps(self.data, indent=2, sort_keys=True)
        if path is None:
            log.info("manifest %s", json.dumps(self.data, sort_keys=True))
        else:
            path.write_text(text + "\n")


def _csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _table_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    widths = {c: max(len(c), *(len(cell(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.rjust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for r in rows:
        lines.append("  ".join(cell(r[c]).rjust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _out_dir(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.inliers < 2:
        raise UsageError("--inliers must be at least 2")
    if args.outliers < 0 or args.count < 1 or args.noise < 0:
        raise UsageError("--outliers must be >= 0, --count >= 1 and --noise >= 0")
    nodes = args.inliers + args.outliers
    knn = min(args.knn, nodes - 1)
    cfg = SynthConfig(
        n_inliers=args.inliers, n_outliers=args.outliers, noise_sigma=args.noise,
        position_jitter=args.jitter, knn_k=knn, feature_dim=args.feature_dim,
        seed=args.seed, projection_seed=args.projection_seed,
        deform=DEFAULT_DEFORM if not args.no_deform else DEFAULT_DEFORM.identity(),
    )
    try:
        pairs = generate_dataset(cfg, args.count)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    save_features(pairs, out)
    manifest = Manifest("gen", args.argv)
    manifest.data["seed"] = args.seed
    manifest.data["config"] = {
        "count": args.count, "inliers": args.inliers, "outliers": args.outliers, "noise": args.noise,
        "jitter": args.jitter, "knn": knn, "feature_dim": args.feature_dim,
        "projection_seed": args.projection_seed, "deform": not args.no_deform,
    }
    manifest.data["outputs"] = {"dataset": str(out)}
    manifest.data["metrics"] = [{"samples": len(pairs)}]
    manifest.finish(out.with_name(out.name + ".manifest.json"))
    print(f"wrote {len(pairs)} samples to {out}")
    return EXIT_OK


def _load_data(path) -> list[GraphPair]:
    data = load_features(path)
    if not data:
        raise UsageError(f"{path} holds no samples")
    return data


def _eval_rows(metrics: dict) -> list[dict]:
    return [{"metric": k, "value": float(v)} for k, v in metrics.items()]


def cmd_train(args) -> int:
    data = _load_data(args.data)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        config = resolve_config(args, base=state.config.to_dict())
        state.config = config
    else:
        config = resolve_config(args)
    out = _out_dir(args.out)
    manifest = Manifest("train", args.argv)
    manifest.data["config"] = config.to_dict()
    manifest.data["seed"] = config.seed
    state = train(data, config, state)
    rows = state.history
    manifest.data["metrics"] = rows
    final = None
    if args.test_data:
        final = evaluate(_load_data(args.test_data), state.store, config)
        manifest.data["test_metrics"] = final
    sys.stdout.write(_table_text(rows))
    if final is not None:
        sys.stdout.write(_table_text(_eval_rows(final)))
    if out is not None:
        ckpt = out / "checkpoint.glmc"
        save_checkpoint(state, ckpt)
        (out / "metrics.csv").write_text(_csv_text(rows))
        (out / "metrics.txt").write_text(_table_text(rows))
        manifest.data["outputs"] = {"checkpoint": str(ckpt), "metrics_csv": str(out / "metrics.csv"),
                                    "metrics_txt": str(out / "metrics.txt")}
    manifest.finish(out / "manifest.json" if out is not None else None)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    width = state.store.values["layer1.theta_n"].shape[0]
    if data[0].p != width:
        raise DimensionError(f"dataset feature width {data[0].p} does not match checkpoint input width {width}")
    metrics = evaluate(data, state.store, state.config)
    rows = _eval_rows(metrics)
    sys.stdout.write(_table_text(rows))
    out = _out_dir(args.out)
    manifest = Manifest("eval", args.argv)
    manifest.data["config"] = state.config.to_dict()
    manifest.data["seed"] = state.config.seed
    manifest.data["metrics"] = [metrics]
    if out is not None:
        (out / "eval.csv").write_text(_csv_text(rows))
        manifest.data["outputs"] = {"eval_csv": str(out / "eval.csv")}
    manifest.finish(out / "manifest.json" if out is not None else None)
    return EXIT_OK


def random_problem(m: int, n: int, p: int, seed: int, knn: int = 2) -> GraphPair:
    """Uniform [-1, 1] features with a random partial permutation as truth."""
    if min(m, n) < 1 or p < 1:
        raise UsageError("problem sizes must be positive")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(m, p))
    y = rng.uniform(-1.0, 1.0, size=(n, p))
    truth = np.zeros((m, n))
    k = min(m, n)
    truth[rng.permutation(m)[:k], rng.permutation(n)[:k]] = 1.0
    return GraphPair(x, y, truth, knn_support(x, min(knn, m - 1)), knn_support(y, min(knn, n - 1)),
                     sample_id=f"gradcheck-{seed}")


def gradcheck_report(config: TrainConfig, pair: GraphPair, h: float, tol: float,
                     max_entries: Optional[int]) -> dc.GradCheckReport:
    store = init_params(pair.p, config)
    return dc.grad_check(lambda params: forward_sample(pair, params, config).loss, store,
                         h=h, tol=tol, max_entries=max_entries, seed=config.seed)


def cmd_gradcheck(args) -> int:
    config = resolve_config(args, base={"widths": (16, 16, 16), "graph_theta_scale": 1.0})
    pair = random_problem(args.m, args.n, args.p, config.seed)
    report = gradcheck_report(config, pair, args.h, args.tol, args.max_entries)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: worst relative error {report.worst:.3e} (tol {args.tol:.1e})")
    manifest = Manifest("gradcheck", args.argv)
    manifest.data["config"] = config.to_dict()
    manifest.data["seed"] = config.seed
    manifest.data["metrics"] = [{"parameter": k, "max_rel_error": v} for k, v in report.max_rel_error.items()]
    out = _out_dir(args.out)
    manifest.finish(out / "manifest.json" if out is not None else None)
    return EXIT_OK if report.passed else 1


def _ablation_job(job):
    name, overrides, seed, base, train_data, test_data = job
    config = TrainConfig.from_dict({**base, **overrides, "seed": seed})
    state = train(train_data, config)
    metrics = evaluate(test_data, state.store, config)
    return name, seed, metrics


def run_ablation(train_data, test_data, base: TrainConfig, seeds: Sequence[int], workers: int = 1) -> list[dict]:
    """Train every ablation variant for every seed; one summary row per variant."""
    base_dict = base.to_dict()
    jobs = [(name, flags, seed, base_dict, train_data, test_data)
            for name, flags, _ in ABLATION_VARIANTS for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    rows = []
    for name, flags, reference in ABLATION_VARIANTS:
        accs = [m["accuracy_hungarian"] for n, _, m in results if n == name]
        cons = [m["l_con"] for n, _, m in results if n == name]
        rows.append({
            "variant": name,
            "graph_learning": int(flags["graph_learning"]),
            "constraint_loss": int(flags["constraint_loss"]),
            "sharpening": int(flags["sharpening"]),
            "seeds": len(accs),
            "accuracy_mean": float(np.mean(accs)),
            "accuracy_std": float(np.std(accs)),
            "l_con_mean": float(np.mean(cons)),
            "reference_accuracy": reference,
            "per_seed": " ".join(repr(a) for a in accs),
        })
    return rows


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    data = _load_data(args.data)
    if args.test_data:
        train_data, test_data = data, _load_data(args.test_data)
    else:
        train_data, test_data = batch_split(data, args.train_fraction, config.seed)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    rows = run_ablation(train_data, test_data, config, list(range(args.seeds)), args.workers)
    shown = [{k: v for k, v in r.items() if k != "per_seed"} for r in rows]
    sys.stdout.write(_table_text(shown))
    out = _out_dir(args.out)
    manifest = Manifest("ablate", args.argv)
    manifest.data["config"] = config.to_dict()
    manifest.data["seed"] = config.seed
    manifest.data["metrics"] = rows
    if out is not None:
        (out / "ablation.csv").write_text(_csv_text(rows))
        (out / "ablation.txt").write_text(_table_text(shown))
        manifest.data["outputs"] = {"ablation_csv": str(out / "ablation.csv")}
    manifest.finish(out / "manifest.json" if out is not None else None)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (see --help epilog)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--gamma-sharp", type=float)
    p.add_argument("--widths", help="d1,d2,d3")
    p.add_argument("--sinkhorn-iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-p", type=float)
    p.add_argument("--no-graph-learning", action="store_true")
    p.add_argument("--no-sharpening", action="store_true")
    p.add_argument("--no-constraint-loss", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="glmnet", description="Graph learning-matching networks.",
                                     epilog=CONFIG_HELP, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--inliers", type=int, default=10)
    g.add_argument("--outliers", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--jitter", type=float, default=0.01)
    g.add_argument("--feature-dim", type=int, default=24)
    g.add_argument("--knn", type=int, default=5)
    g.add_argument("--projection-seed", type=int, default=0)
    g.add_argument("--no-deform", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model", epilog=CONFIG_HELP, formatter_class=fmt)
    t.add_argument("--data", required=True)
    t.add_argument("--test-data")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check", epilog=CONFIG_HELP,
                       formatter_class=fmt)
    c.add_argument("--m", type=int, default=5)
    c.add_argument("--n", type=int, default=5)
    c.add_argument("--p", type=int, default=8)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int)
    c.add_argument("--out", help="output directory")
    _add_train_flags(c)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="ablation table", epilog=CONFIG_HELP, formatter_class=fmt)
    a.add_argument("--data", required=True)
    a.add_argument("--test-data")
    a.add_argument("--train-fraction", type=float, default=0.8)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", help="output directory")
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("GLM_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("glmnet").setLevel(level)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.func(args)
    except (UsageError, DimensionError, ContractError) as exc:
        print(f"glmnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"glmnet: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, InvariantError, CheckpointCorruptError, CheckpointVersionError) as exc:
        print(f"glmnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
