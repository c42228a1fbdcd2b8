"""End-to-end orchestration: configuration, seeded stages, report and plot data."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from microseg import io
from microseg.domain import (
    DEFAULT_NONZERO_THRESHOLD,
    TRAIT_INITIALS,
    CoefficientMatrix,
    dominant_orders,
    format_order,
    scale_population,
    score_traits,
)
from microseg.errors import ConfigError, DataError, SchemaError, StageOrderError
from microseg.rnn import (
    LstmModel,
    TrainConfig,
    gradient_check,
    random_gradcheck_problem,
    train,
    trajectory_points,
)
from microseg.segmentation import (
    build_hierarchy,
    detect_course_change,
    geometric_purity,
    kmeans_labels,
    permutation_null,
    purity_score,
    stability_check,
    turning_angles,
    window_sequences,
)
from microseg.surrogate import (
    LinearSurrogate,
    displacement,
    evaluate_fidelity,
    fit_linear,
    fit_polynomial_baseline,
    rotate_azimuth,
    vector_angles,
)
from microseg.synth import (
    SynthConfig,
    aggregate_transactions,
    generate_coefficients,
    generate_population,
    transactions_from_dataset,
)

log = logging.getLogger(__name__)

# every module seed is master seed + a fixed offset
SEED_OFFSETS = {
    "synth": 0,
    "coefficients": 1,
    "transactions": 2,
    "train": 3,
    "segmentation": 4,
    "plot": 5,
}

GRADCHECK_SEEDS = 10
GRADCHECK_TOLERANCE = 1e-4


def derive_seed(master: int, module: str) -> int:
    return (int(master) + SEED_OFFSETS[module]) % 2**64


def _section(cls, d: dict, name: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {name} config fields: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class ExplainConfig:
    nonzero_threshold: float = DEFAULT_NONZERO_THRESHOLD
    direction: str = "net"          # "net" (h_T - h_1) or "final" (h_T)
    polynomial_baseline: bool = True

    def __post_init__(self):
        if self.nonzero_threshold < 0:
            raise ConfigError("nonzero_threshold must be >= 0")
        if self.direction not in ("net", "final"):
            raise ConfigError(f"unknown direction mode {self.direction!r}")


@dataclass(frozen=True)
class SegmentationConfig:
    depth: int = 4
    n_clusters: int = 5
    coarse_window: int = 6
    fine_window: int = 1
    course_change_threshold: float = math.pi / 4
    min_node_members: int = 100

    def __post_init__(self):
        if not 1 <= self.depth <= 4:
            raise ConfigError("depth must lie in [1, 4]")
        if self.n_clusters < 1 or self.min_node_members < 1:
            raise ConfigError("n_clusters and min_node_members must be >= 1")
        if self.coarse_window < 1 or self.fine_window < 1:
            raise ConfigError("windows must be >= 1")
        if not self.course_change_threshold > 0:
            raise ConfigError("course_change_threshold must be > 0")


@dataclass(frozen=True)
class PlotConfig:
    fig1_customers: int = 200       # 0 keeps everyone

    def __post_init__(self):
        if self.fig1_customers < 0:
            raise ConfigError("fig1_customers must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """All pipeline parameters. Module seeds come from ``seed`` via :data:`SEED_OFFSETS`."""

    seed: int = 42
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    plot: PlotConfig = field(default_factory=PlotConfig)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "synth", dataclasses.replace(self.synth, seed=derive_seed(self.seed, "synth")))
        object.__setattr__(self, "train", dataclasses.replace(self.train, seed=derive_seed(self.seed, "train")))
        if self.segmentation.coarse_window > self.synth.n_periods or \
                self.segmentation.fine_window > self.synth.n_periods:
            raise ConfigError("stability windows cannot exceed n_periods")

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "RunConfig":
        d = dict(d)
        allowed = {"seed", "synth", "train", "explain", "segmentation", "plot"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name in ("synth", "train"):
            if "seed" in d.get(name, {}):
                raise ConfigError(f"{name}.seed is derived from the master seed; set 'seed' instead")
        master = seed if seed is not None else d.get("seed", 42)
        return cls(
            seed=int(master),
            synth=_section(SynthConfig, {**d.get("synth", {}), "seed": 0}, "synth"),
            train=_section(TrainConfig, d.get("train", {}), "train"),
            explain=_section(ExplainConfig, d.get("explain", {}), "explain"),
            segmentation=_section(SegmentationConfig, d.get("segmentation", {}), "segmentation"),
            plot=_section(PlotConfig, d.get("plot", {}), "plot"),
        )

    def to_dict(self) -> dict:
        synth = self.synth.to_dict()
        trn = self.train.to_dict()
        del synth["seed"], trn["seed"]
        return {
            "seed": int(self.seed),
            "derived_seeds": {k: derive_seed(self.seed, k) for k in SEED_OFFSETS},
            "synth": synth,
            "train": trn,
            "explain": dataclasses.asdict(self.explain),
            "segmentation": dataclasses.asdict(self.segmentation),
            "plot": dataclasses.asdict(self.plot),
        }


# ---------------------------------------------------------------- stages

def stage_synth(out: Path, synth: SynthConfig, coefficients: CoefficientMatrix | None = None,
                write_transactions: bool = True):
    """Generate coefficients and population; write all data files into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    if coefficients is None:
        coefficients = generate_coefficients(synth.k_classes, synth.n_nonzero_rows,
                                             (synth.seed + SEED_OFFSETS["coefficients"]) % 2**64)
    ds = generate_population(synth, coefficients)
    io.write_coefficients(out / "coefficients.csv", coefficients)
    io.write_dataset(out / "dataset.json", ds)
    io.write_traits(out / "traits.csv", ds.customer_ids, ds.traits, ds.orders)
    if write_transactions:
        rows = transactions_from_dataset(ds, (synth.seed + SEED_OFFSETS["transactions"]) % 2**64)
        io.write_transactions(out / "transactions.csv", *rows)
    return ds


def score_transactions(rows, coefficients: CoefficientMatrix):
    """Population-scaled trait grades from raw transactions (one bucket per period).

    Returns ``(customer_ids, grades, orders)``; grades come from the mean of
    the per-period shares, as in the generated datasets.
    """
    profiles = aggregate_transactions(rows, 1, coefficients.k)
    by_customer: dict = {}
    for p in profiles:
        by_customer.setdefault(p.customer_id, []).append(p.shares)
    ids = list(by_customer)
    mean_shares = np.array([np.mean(by_customer[c], axis=0) for c in ids])
    grades, _ = scale_population(score_traits(mean_shares, coefficients))
    return ids, grades, dominant_orders(grades)


def model_to_dict(model: LstmModel, config: TrainConfig, report, dataset) -> dict:
    return {
        "format": "microseg-lstm",
        "version": 1,
        "architecture": {"hidden": 3, "inputs": model.k, "gates": ["input", "forget", "output", "candidate"],
                         "readout": "W_out h_T + b_out"},
        "weights": model.to_dict(),
        "config": config.to_dict(),
        "training_report": report.summary(),
        "history": {"train_mse": report.train_mse, "val_mse": report.val_mse},
        "split": {"train": [dataset.customer_ids[i] for i in report.train_idx],
                  "validation": [dataset.customer_ids[i] for i in report.val_idx]},
    }


def read_model(path):
    d = io.read_json(path)
    if d.get("format") != "microseg-lstm":
        raise SchemaError(f"{path} is not a model document")
    return LstmModel.from_dict(d["weights"]), d


def split_from_model(model_doc: dict, dataset):
    pos = {c: i for i, c in enumerate(dataset.customer_ids)}
    try:
        tr = np.array([pos[c] for c in model_doc["split"]["train"]], dtype=np.int64)
        va = np.array([pos[c] for c in model_doc["split"]["validation"]], dtype=np.int64)
    except KeyError as e:
        raise SchemaError(f"model split names unknown customer {e}") from None
    return tr, va


def stage_train(out_path: Path, dataset, config: TrainConfig):
    model, report = train(dataset, config)
    io.write_json(out_path, model_to_dict(model, config, report, dataset))
    return model, report


def stage_extract(out_path: Path, model: LstmModel, dataset):
    points = trajectory_points(model, dataset.profiles)
    io.write_trajectories(out_path, dataset.customer_ids, points)
    return points


def stage_explain(out_dir: Path, points, dataset, train_idx, test_idx, cfg: ExplainConfig):
    """Angles, linear surrogate (fit on the training customers) and its fidelity on the rest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    angles = vector_angles(displacement(points, cfg.direction))
    X = dataset.mean_profiles
    surrogate = fit_linear(X[train_idx], angles[train_idx])
    poly = fit_polynomial_baseline(X[train_idx], angles[train_idx]) if cfg.polynomial_baseline else None
    fidelity = evaluate_fidelity(surrogate, dataset.coefficients, X[test_idx], angles[test_idx],
                                 polynomial=poly, threshold=cfg.nonzero_threshold)
    surrogate.diagnostics.update({"direction": cfg.direction, "nonzero_threshold": cfg.nonzero_threshold,
                                  "n_train": int(len(train_idx)), "n_test": int(len(test_idx))})
    io.write_angles(out_dir / "angles.csv", dataset.customer_ids, angles, dataset.orders)
    io.write_json(out_dir / "surrogate.json", surrogate.to_dict())
    io.write_json(out_dir / "fidelity.json", fidelity.to_dict())
    return angles, surrogate, fidelity


def stage_cluster(out_path: Path, customer_ids, angles, orders, rotation: float, cfg: SegmentationConfig,
                  seed: int):
    """Hierarchy over rotated angles plus the top-level k-means purity."""
    rotated = rotate_azimuth(angles, rotation)
    tree = build_hierarchy(customer_ids, rotated, orders, depth=cfg.depth, seed=seed)
    dominant = np.asarray(orders)[:, 0]
    clusters = kmeans_labels(rotated, cfg.n_clusters, seed)
    top = {
        "k": cfg.n_clusters,
        "purity": purity_score(clusters, dominant),
        "null_purity": permutation_null(clusters, dominant, seed),
    }
    doc = {"azimuth_rotation": rotation, "top_level": top, **tree.to_dict()}
    io.write_json(out_path, doc)
    return tree, top


def stability_rows(rep):
    for cid, c, f, dv in rep.rows():
        yield (cid, TRAIT_INITIALS[c] if c >= 0 else "", TRAIT_INITIALS[f] if f >= 0 else "", dv)


def stage_stability(out_path: Path, model, dataset, cfg: SegmentationConfig, mode: str = "net"):
    rep = stability_check(model, dataset, cfg.coarse_window, cfg.fine_window, mode)
    io.write_csv(out_path, io.STABILITY_HEADER, stability_rows(rep))
    return rep


def course_change_summary(points, dataset, threshold: float) -> dict:
    """Compare detected course changes with the generator's switch periods."""
    sp = np.asarray(dataset.switch_period)
    switched = np.nonzero(sp >= 1)[0]
    still = np.nonzero(sp < 1)[0]
    detectable = hits = 0
    by_period: dict = {}
    for i in switched:
        angles, _ = turning_angles(points[i])
        if not np.isfinite(angles).any():
            continue
        detectable += 1
        found = detect_course_change(points[i], threshold)
        ok = found is not None and abs(found - int(sp[i])) <= 1
        hits += ok
        slot = by_period.setdefault(str(int(sp[i])), [0, 0])
        slot[0] += 1
        slot[1] += int(ok)
    false_alarms = sum(detect_course_change(points[i], threshold) is not None for i in still)
    return {
        "threshold": threshold,
        "n_switched": int(len(switched)),
        "n_detectable": detectable,
        "n_hits": int(hits),
        "hit_rate": hits / detectable if detectable else None,
        "by_switch_period": {k: {"n": v[0], "hits": v[1]} for k, v in sorted(by_period.items())},
        "false_alarm_rate": false_alarms / len(still) if len(still) else None,
    }


def gradcheck_summary(seed: int, n_seeds: int = GRADCHECK_SEEDS) -> dict:
    errors = []
    for s in range(seed, seed + n_seeds):
        model, batch = random_gradcheck_problem(s)
        errors.append(gradient_check(model, batch, 1e-5))
    return {"epsilon": 1e-5, "seeds": list(range(seed, seed + n_seeds)), "max_relative_error": max(errors),
            "per_seed": errors}


# ---------------------------------------------------------------- plot data

def pick_fig3_customer(dataset) -> int:
    """Latest-switching regime-switch customer (first by id on ties); customer 0 if none switched."""
    sp = np.asarray(dataset.switch_period)
    if not (sp >= 1).any():
        log.warning("no regime-switch customers; fig3 shows customer 0")
        return 0
    return int(np.argmax(sp))


def emit_plot_data(art: Path, out: Path | None = None, seg: SegmentationConfig | None = None,
                   plot: PlotConfig | None = None, seed: int = 0):
    """Write fig1_trajectories.csv, fig2_angles.csv and fig3_pair.csv from pipeline artifacts."""
    art = Path(art)
    out = Path(out) if out is not None else art
    seg = seg or SegmentationConfig()
    plot = plot or PlotConfig()
    for name in ("dataset.json", "model.json", "trajectories.csv", "angles.csv"):
        if not (art / name).exists():
            raise StageOrderError(f"plot-data needs {name} in {art}; run the earlier stages first")
    dataset = io.read_dataset(art / "dataset.json")
    model, _ = read_model(art / "model.json")
    ids, points = io.read_trajectories(art / "trajectories.csv")
    a_ids, angles, a_orders = io.read_angles(art / "angles.csv")
    if ids != list(dataset.customer_ids) or a_ids != ids:
        raise SchemaError("trajectories, angles and dataset list different customers")
    out.mkdir(parents=True, exist_ok=True)

    n = len(ids)
    rng = np.random.default_rng(seed)
    pick = np.arange(n) if plot.fig1_customers == 0 or plot.fig1_customers >= n else \
        np.sort(rng.choice(n, plot.fig1_customers, replace=False))
    orders = dataset.orders
    io.write_csv(out / "fig1_trajectories.csv", ["customer_id", "step", "h1", "h2", "h3", "dominant_trait"],
                 ([ids[i], t + 1, *map(float, points[i, t]), TRAIT_INITIALS[orders[i, 0]]]
                  for i in pick for t in range(points.shape[1])))

    io.write_csv(out / "fig2_angles.csv",
                 ["customer_id", "theta", "phi", "depth1", "depth2", "depth3", "depth4"],
                 ([ids[i], float(angles[i, 0]), float(angles[i, 1]),
                   *[format_order(a_orders[i][:d]) for d in range(1, 5)]] for i in range(n)))

    j = pick_fig3_customer(dataset)
    rows = []
    for label, window in (("coarse", seg.coarse_window), ("fine", seg.fine_window)):
        pts = trajectory_points(model, window_sequences(dataset.profiles[j:j + 1], window))[0]
        rows += [[ids[j], label, window, t + 1, *map(float, pts[t]), int(dataset.switch_period[j])]
                 for t in range(pts.shape[0])]
    io.write_csv(out / "fig3_pair.csv",
                 ["customer_id", "window", "window_periods", "step", "h1", "h2", "h3", "switch_period"], rows)
    return {"fig1_customers": int(len(pick)), "fig2_rows": n, "fig3_customer": ids[j]}


# ---------------------------------------------------------------- acceptance

def acceptance(report: dict) -> list:
    """Pass/fail for the criteria that a single run can decide."""
    tr, sur, seg = report["training"], report["surrogate"], report["segmentation"]
    out = []

    def add(cid, name, value, threshold, passed):
        out.append({"id": cid, "name": name, "value": value, "threshold": threshold, "passed": bool(passed)})

    g = report["gradient_check"]["max_relative_error"]
    add(1, "gradient check max relative error", g, GRADCHECK_TOLERANCE, g < GRADCHECK_TOLERANCE)
    add(2, "validation MSE below label variance", tr["final_val_mse"], tr["val_label_variance"],
        tr["final_val_mse"] < tr["val_label_variance"])
    r2, gap = sur["r2_test"], sur["r2_polynomial_test"] - sur["r2_test"]
    add(3, "surrogate test R2 >= 0.70 and polynomial gain < 0.05", [r2, gap], [0.70, 0.05],
        r2 >= 0.70 and gap < 0.05)
    top = seg["top_level"]
    excess = top["purity"] - top["null_purity"]
    add(6, "dominant-trait purity >= 0.8 and exceeds null by >= 0.4", [top["purity"], excess], [0.8, 0.4],
        top["purity"] >= 0.8 and excess >= 0.4)
    lvl = seg["levels"].get("2")
    m = lvl["min_excess"] if lvl else None
    add(7, "depth-2 purity excess over null >= 0.1 in every large depth-1 node", m, 0.1,
        m is not None and m >= 0.1)
    s = report["stability"]["agreement_rate_no_switch"]
    add(8, "window stability agreement on no-switch population", s, 0.9, s >= 0.9)
    h = report["course_change"]["hit_rate"]
    add(9, "course change within one period of switch", h, 0.7, h is not None and h >= 0.7)
    c = sur["max_abs_correlation"]
    add(10, "max |r| per angle column", c, 0.5, all(v is not None and v >= 0.5 for v in c))
    return out


# ---------------------------------------------------------------- full run

def run_pipeline(config: RunConfig, out: Path) -> tuple:
    """Run every stage into ``out``. Returns ``(report, timing)``.

    ``report.json`` holds only seed-determined values; wall-clock times go
    to ``timing.json`` so that repeated runs give identical reports.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timing: dict = {}
    t0 = time.perf_counter()

    def lap(name, t):
        timing[name] = time.perf_counter() - t
        log.info("stage %s done in %.1f s", name, timing[name])
        return time.perf_counter()

    stage = "synth"
    try:
        t = time.perf_counter()
        ds = stage_synth(out, config.synth)
        t = lap("synth", t)
        stage = "train"
        model, treport = stage_train(out / "model.json", ds, config.train)
        t = lap("train", t)
        stage = "extract"
        points = stage_extract(out / "trajectories.csv", model, ds)
        t = lap("extract", t)
        stage = "explain"
        tr_idx, va_idx = np.array(treport.train_idx), np.array(treport.val_idx)
        angles, surrogate, fidelity = stage_explain(out, points, ds, tr_idx, va_idx, config.explain)
        t = lap("explain", t)
        stage = "cluster"
        seg_seed = derive_seed(config.seed, "segmentation")
        tree, top = stage_cluster(out / "hierarchy.json", ds.customer_ids, angles, ds.orders,
                                  surrogate.rotation, config.segmentation, seg_seed)
        t = lap("cluster", t)
        stage = "stability"
        stab = stage_stability(out / "stability.csv", model, ds, config.segmentation, config.explain.direction)
        still = np.nonzero(~ds.regime_switch)[0]
        stab_still = stability_check(model, ds, config.segmentation.coarse_window,
                                     config.segmentation.fine_window, config.explain.direction, customers=still) \
            if len(still) else None
        course = course_change_summary(points, ds, config.segmentation.course_change_threshold)
        t = lap("stability", t)
        stage = "gradcheck"
        grad = gradcheck_summary(0)
        t = lap("gradcheck", t)
        stage = "plot-data"
        plots = emit_plot_data(out, out, config.segmentation, config.plot, derive_seed(config.seed, "plot"))
        t = lap("plot-data", t)
    except Exception as e:
        e.stage = stage
        raise

    orders = ds.orders
    fid = fidelity.to_dict()
    fid["max_abs_correlation"] = fidelity.max_abs_correlation()
    report = {
        "seed": int(config.seed),
        "config": config.to_dict(),
        "dataset": {
            "n_customers": ds.n_customers,
            "n_periods": ds.n_periods,
            "k_classes": ds.k,
            "coefficient_nonzero_rows": int(ds.coefficients.nonzero_rows(0.0).sum()),
            "n_regime_switch": int(ds.regime_switch.sum()),
            "intended_dominant_agreement": float(np.mean(orders[:, 0] == ds.intended_dominant)),
            "dominant_counts": {TRAIT_INITIALS[i]: int((orders[:, 0] == i).sum()) for i in range(5)},
        },
        "training": {**treport.summary(), "n_train": len(treport.train_idx), "n_validation": len(treport.val_idx)},
        "surrogate": {**fid, "azimuth_rotation": surrogate.rotation, "direction": config.explain.direction},
        "segmentation": {
            "top_level": top,
            "levels": {str(k): v for k, v in tree.level_summary(config.segmentation.min_node_members).items()},
            "nodes_per_depth": {str(d): len(tree.level(d)) for d in range(1, tree.depth + 1)},
        },
        "stability": {
            "coarse_window": config.segmentation.coarse_window,
            "fine_window": config.segmentation.fine_window,
            "agreement_rate_all": stab.agreement_rate,
            "agreement_rate_no_switch": stab_still.agreement_rate if stab_still else None,
            "median_divergence_rad": float(np.nanmedian(stab.divergence)),
            "median_divergence_no_switch_rad": float(np.nanmedian(stab_still.divergence)) if stab_still else None,
            "n_excluded": stab.n_excluded,
        },
        "course_change": course,
        "gradient_check": grad,
        "plot_data": plots,
    }
    report["acceptance"] = acceptance(report)
    io.write_json(out / "report.json", report)
    timing["total"] = time.perf_counter() - t0
    io.write_json(out / "timing.json", timing)
    return report, timing


def load_run_inputs(data_dir):
    """Dataset from a data directory, with a clear error when it is missing."""
    p = Path(data_dir)
    if not (p / "dataset.json").exists() and not (p.is_file() and p.suffix == ".json"):
        raise StageOrderError(f"no dataset.json in {p}; run 'synth' first")
    try:
        return io.read_dataset(p)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed dataset: {e}") from None


__all__ = [
    "RunConfig", "ExplainConfig", "SegmentationConfig", "PlotConfig", "SEED_OFFSETS", "derive_seed",
    "run_pipeline", "emit_plot_data", "acceptance", "gradcheck_summary", "course_change_summary",
    "score_transactions", "DataError",
]
