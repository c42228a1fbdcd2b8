"""Command-line entry point: ``microseg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from microseg import io
from microseg.errors import ConfigError, MicrosegError, StageOrderError
from microseg.pipeline import (
    GRADCHECK_TOLERANCE,
    ExplainConfig,
    PlotConfig,
    RunConfig,
    SegmentationConfig,
    derive_seed,
    emit_plot_data,
    gradcheck_summary,
    load_run_inputs,
    read_model,
    run_pipeline,
    score_transactions,
    split_from_model,
    stage_cluster,
    stage_explain,
    stage_extract,
    stage_stability,
    stage_synth,
    stage_train,
)
from microseg.rnn import TrainConfig, trajectory_points
from microseg.synth import SynthConfig

log = logging.getLogger("microseg")

DEFAULT_SEED = 42
TRAIN_RUNTIME_LIMIT = 180.0
RUN_RUNTIME_LIMIT = 300.0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return d


def _module_config(args, cls, section: str, module: str):
    """Config for one stage: a bare field mapping or the matching section of a run config.

    ``--seed`` is a master seed and always wins; otherwise an explicit ``seed``
    field is used as given, and failing that the default master seed.
    """
    d = _load_config(args.config)
    if section in d and isinstance(d[section], dict):
        master = d.get("seed", DEFAULT_SEED)
        d = dict(d[section])
        d.setdefault("seed", derive_seed(master, module))
    if args.seed is not None:
        d["seed"] = derive_seed(args.seed, module)
    d.setdefault("seed", derive_seed(DEFAULT_SEED, module))
    return cls.from_dict(d)


def _section_config(args, cls, section: str):
    d = _load_config(args.config)
    d = d.get(section, {}) if section in d or not d else d
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {section} config: {e}") from None


def cmd_synth(args):
    cfg = _module_config(args, SynthConfig, "synth", "synth")
    coeffs = io.read_coefficients(args.coefficients) if args.coefficients else None
    out = Path(args.out or "data")
    ds = stage_synth(out, cfg, coeffs, write_transactions=not args.no_transactions)
    print(f"wrote {ds.n_customers} customers x {ds.n_periods} periods x {ds.k} classes to {out}")


def cmd_score(args):
    data = Path(args.data) if args.data else None
    tx = Path(args.transactions) if args.transactions else (data / "transactions.csv" if data else None)
    cf = Path(args.coefficients) if args.coefficients else (data / "coefficients.csv" if data else None)
    if tx is None or cf is None:
        raise ConfigError("score needs --transactions and --coefficients (or --data)")
    coeffs = io.read_coefficients(cf)
    ids, grades, orders = score_transactions(io.read_transactions(tx), coeffs)
    out = Path(args.out or "traits.csv")
    io.write_traits(out, ids, grades, orders)
    print(f"scored {len(ids)} customers into {out}")


def cmd_train(args):
    ds = load_run_inputs(args.data)
    cfg = _module_config(args, TrainConfig, "train", "train")
    out = Path(args.out or "model.json")
    t = time.perf_counter()
    _, rep = stage_train(out, ds, cfg)
    s = rep.summary()
    print(f"validation MSE {s['final_val_mse']:.6g} (label variance {s['val_label_variance']:.6g}, "
          f"initial {s['initial_val_mse']:.6g}) in {time.perf_counter() - t:.1f} s")


def cmd_extract(args):
    ds = load_run_inputs(args.data)
    model, _ = read_model(args.model)
    out = Path(args.out or "trajectories.csv")
    stage_extract(out, model, ds)
    print(f"wrote {ds.n_customers} trajectories to {out}")


def cmd_explain(args):
    ds = load_run_inputs(args.data)
    model, doc = read_model(args.model)
    cfg = _section_config(args, ExplainConfig, "explain")
    if args.nonzero_threshold is not None or args.direction is not None:
        cfg = ExplainConfig(args.nonzero_threshold if args.nonzero_threshold is not None else cfg.nonzero_threshold,
                            args.direction or cfg.direction, cfg.polynomial_baseline)
    tr, va = split_from_model(doc, ds)
    points = trajectory_points(model, ds.profiles)
    out = Path(args.out_dir or args.out or ".")
    _, _, fid = stage_explain(out, points, ds, tr, va, cfg)
    print(f"test R2 {fid.r2_test:.4f} (polynomial {fid.r2_polynomial_test:.4f}), "
          f"{fid.nonzero_count} non-zero rows, max |r| per angle {fid.max_abs_correlation()}")


def cmd_cluster(args):
    a_ids, angles, _ = io.read_angles(args.angles)
    t_ids, _, orders = io.read_traits(args.traits)
    pos = {c: i for i, c in enumerate(t_ids)}
    missing = [c for c in a_ids if c not in pos]
    if missing:
        raise StageOrderError(f"{len(missing)} customers in angles have no traits, e.g. {missing[0]}")
    orders = orders[[pos[c] for c in a_ids]]
    if not np.all(np.isfinite(angles)):
        raise ConfigError("angles contain undefined values")
    if args.surrogate:
        rotation = float(io.read_json(args.surrogate)["azimuth_rotation"])
    else:
        rotation = float(np.arctan2(np.mean(np.sin(angles[:, 0])), np.mean(np.cos(angles[:, 0]))))
    seg = _section_config(args, SegmentationConfig, "segmentation")
    seg = SegmentationConfig(args.depth or seg.depth, args.k or seg.n_clusters, seg.coarse_window,
                             seg.fine_window, seg.course_change_threshold, seg.min_node_members)
    seed = derive_seed(args.seed if args.seed is not None else DEFAULT_SEED, "segmentation")
    out = Path(args.out or "hierarchy.json")
    tree, top = stage_cluster(out, a_ids, angles, orders, rotation, seg, seed)
    print(f"{len(tree.nodes)} nodes to depth {tree.depth}; top-level purity {top['purity']:.3f} "
          f"(null {top['null_purity']:.3f})")


def cmd_stability(args):
    ds = load_run_inputs(args.data)
    model, _ = read_model(args.model)
    seg = _section_config(args, SegmentationConfig, "segmentation")
    seg = SegmentationConfig(seg.depth, seg.n_clusters, args.coarse or seg.coarse_window,
                             args.fine or seg.fine_window, seg.course_change_threshold, seg.min_node_members)
    if max(seg.coarse_window, seg.fine_window) > ds.n_periods:
        raise ConfigError(f"windows must not exceed the {ds.n_periods} periods of the dataset")
    out = Path(args.out or "stability.csv")
    rep = stage_stability(out, model, ds, seg, args.direction or "net")
    print(f"agreement {rep.agreement_rate:.4f} over {ds.n_customers - rep.n_excluded} customers "
          f"({rep.n_excluded} excluded)")


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    t = time.perf_counter()
    g = gradcheck_summary(seed, args.n_seeds)
    err = g["max_relative_error"]
    print(f"max relative error {err:.3e} over seeds {seed}..{seed + args.n_seeds - 1} "
          f"in {time.perf_counter() - t:.1f} s")
    if not err < GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 3
    return 0


def cmd_run(args):
    d = _load_config(args.config)
    cfg = RunConfig.from_dict(d, seed=args.seed if args.seed is not None else None)
    out = Path(args.out or "artifacts")
    report, timing = run_pipeline(cfg, out)
    lines = [(c["id"], c["name"], c["passed"], c["value"], c["threshold"]) for c in report["acceptance"]]
    lines.append((2, "training runtime (s)", timing["train"] < TRAIN_RUNTIME_LIMIT, timing["train"],
                  TRAIN_RUNTIME_LIMIT))
    lines.append((12, "end-to-end runtime (s)", timing["total"] < RUN_RUNTIME_LIMIT, timing["total"],
                  RUN_RUNTIME_LIMIT))
    for cid, name, ok, value, thr in sorted(lines, key=lambda r: r[0]):
        print(f"[{'PASS' if ok else 'FAIL'}] {cid:>2} {name}: {_short(value)} (threshold {_short(thr)})")
    print(f"artifacts in {out} ({timing['total']:.1f} s)")
    if args.check and not all(r[2] for r in lines):
        return 4
    return 0


def _short(v):
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    if isinstance(v, float):
        return f"{v:.4g}" if math.isfinite(v) else str(v)
    return str(v)


def cmd_plot_data(args):
    art = Path(args.artifacts or args.out or "artifacts")
    out = Path(args.out) if args.out else art
    seg = _section_config(args, SegmentationConfig, "segmentation")
    plot = _section_config(args, PlotConfig, "plot")
    seed = derive_seed(args.seed if args.seed is not None else DEFAULT_SEED, "plot")
    info = emit_plot_data(art, out, seg, plot, seed)
    print(f"wrote fig1 ({info['fig1_customers']} customers), fig2 ({info['fig2_rows']} rows), "
          f"fig3 (customer {info['fig3_customer']}) to {out}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (unsigned 64-bit)")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--verbose", "-v", action="store_true", help="log stage progress")

    p = _Parser(prog="microseg", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--coefficients", help="use this coefficients.csv instead of drawing one")
    s.add_argument("--no-transactions", action="store_true", help="skip transactions.csv")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("score", parents=[common], help="trait grades from raw transactions")
    s.add_argument("--data", help="directory holding transactions.csv and coefficients.csv")
    s.add_argument("--transactions")
    s.add_argument("--coefficients")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("train", parents=[common], help="train the LSTM")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", parents=[common], help="hidden-state trajectories")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("explain", parents=[common], help="direction angles and linear surrogate")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--nonzero-threshold", type=float)
    s.add_argument("--direction", choices=["net", "final"])
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("cluster", parents=[common], help="trait-ordered hierarchy with purity")
    s.add_argument("--angles", required=True)
    s.add_argument("--traits", required=True)
    s.add_argument("--depth", type=int)
    s.add_argument("--k", type=int, help="clusters for the top-level purity")
    s.add_argument("--surrogate", help="surrogate.json whose azimuth rotation to use")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("stability", parents=[common], help="segment agreement between two windows")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--coarse", type=int)
    s.add_argument("--fine", type=int)
    s.add_argument("--direction", choices=["net", "final"])
    s.set_defaults(func=cmd_stability)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of backprop")
    s.add_argument("--n-seeds", type=int, default=10)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("run", parents=[common], help="full pipeline")
    s.add_argument("--check", action="store_true", help="exit 4 when an acceptance threshold fails")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("plot-data", parents=[common], help="CSV data behind the three figures")
    s.add_argument("--artifacts", help="directory of a finished run (default: --out)")
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except MicrosegError as e:
        stage = getattr(e, "stage", args.command)
        print(f"error in {stage}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error in {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
