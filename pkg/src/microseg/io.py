"""Artifact files: JSON and CSV with 17-significant-digit floats."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from microseg.domain import TRAIT_NAMES, CoefficientMatrix, TraitScaler, format_order, parse_order
from microseg.errors import SchemaError, StageOrderError
from microseg.synth import Dataset, SynthConfig

COEFF_HEADER = ["class_id", "class_name", *TRAIT_NAMES]
TRAITS_HEADER = ["customer_id", *TRAIT_NAMES, "dominant_order"]
TRANSACTIONS_HEADER = ["customer_id", "bucket", "class_id", "amount"]
TRAJECTORY_HEADER = ["customer_id", "step", "h1", "h2", "h3"]
ANGLES_HEADER = ["customer_id", "theta", "phi", "dominant_order"]
STABILITY_HEADER = ["customer_id", "coarse_cluster", "fine_cluster", "divergence_rad"]


def fmt(x) -> str:
    """Float as text with 17 significant digits; non-finite values become empty."""
    x = float(x)
    if not math.isfinite(x):
        return ""
    return "%.17g" % x


def _encode(obj, out: list, indent: int, level: int):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," if indent else ", "
    if obj is None or obj is True or obj is False:
        out.append(json.dumps(obj))
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt(obj) if math.isfinite(obj) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            out.append((sep if i else "") + pad + json.dumps(str(k)) + ": ")
            _encode(v, out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not items:
            out.append("[]")
            return
        flat = all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in items)
        out.append("[")
        for i, v in enumerate(items):
            out.append(("," if i else "") + (" " if i and flat else "") + ("" if flat else pad))
            _encode(v, out, indent, level + 1)
        out.append(("" if flat else end) + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float at 17 significant digits (NaN/inf as null)."""
    out: list = []
    _encode(obj, out, indent, 0)
    return "".join(out) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj), encoding="utf-8", newline="\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise StageOrderError(f"missing artifact {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path, header=None) -> list:
    path = Path(path)
    if not path.exists():
        raise StageOrderError(f"missing artifact {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path} is empty")
    if header is not None and rows[0] != list(header):
        raise SchemaError(f"{path}: expected header {','.join(header)}, got {','.join(rows[0])}")
    return rows[1:]


def write_coefficients(path, coeffs: CoefficientMatrix):
    write_csv(path, COEFF_HEADER,
              ([i, name, *map(float, row)] for i, (name, row) in enumerate(zip(coeffs.class_names, coeffs.values))))


def read_coefficients(path) -> CoefficientMatrix:
    rows = read_csv(path, COEFF_HEADER)
    ids = [int(r[0]) for r in rows]
    if ids != list(range(len(rows))):
        raise SchemaError("class_id must run 0..K-1 in order")
    try:
        values = np.array([[float(v) for v in r[2:]] for r in rows])
    except ValueError as e:
        raise SchemaError(f"bad coefficient value: {e}") from None
    return CoefficientMatrix(tuple(r[1] for r in rows), values)


def write_traits(path, customer_ids, traits, orders):
    write_csv(path, TRAITS_HEADER,
              ([cid, *map(float, t), format_order(o)] for cid, t, o in zip(customer_ids, traits, orders)))


def read_traits(path):
    """Returns ``(customer_ids, grades N x 5, orders N x 5)``."""
    rows = read_csv(path, TRAITS_HEADER)
    ids = [r[0] for r in rows]
    grades = np.array([[float(v) for v in r[1:6]] for r in rows])
    orders = np.array([parse_order(r[6]) for r in rows])
    return ids, grades, orders


def write_transactions(path, ids, buckets, classes, amounts):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRANSACTIONS_HEADER) + "\n")
        fh.writelines(f"{c},{b},{k},{a:.2f}\n" for c, b, k, a in zip(ids, buckets, classes, amounts))


def read_transactions(path):
    rows = read_csv(path, TRANSACTIONS_HEADER)
    return [(r[0], int(r[1]), int(r[2]), float(r[3])) for r in rows]


def dataset_to_dict(ds: Dataset) -> dict:
    orders = ds.orders
    period_orders = ds.period_orders
    customers = []
    for i, cid in enumerate(ds.customer_ids):
        sp = int(ds.switch_period[i])
        customers.append({
            "customer_id": cid,
            "profiles": ds.profiles[i],
            "traits": ds.traits[i],
            "dominant_order": format_order(orders[i]),
            "period_traits": ds.period_traits[i],
            "period_dominant_orders": [format_order(o) for o in period_orders[i]],
            "regime_switch": sp >= 1,
            "switch_period": sp if sp >= 1 else None,
            "intended_dominant": int(ds.intended_dominant[i]),
        })
    return {
        "format": "microseg-dataset",
        "version": 1,
        "config": ds.config.to_dict() if ds.config is not None else None,
        "n_customers": ds.n_customers,
        "n_periods": ds.n_periods,
        "k_classes": ds.k,
        "trait_names": list(TRAIT_NAMES),
        "coefficients": {"class_names": list(ds.coefficients.class_names),
                         "values": ds.coefficients.values},
        "scaling": ds.scaler.to_dict(),
        "customers": customers,
    }


def dataset_from_dict(d: dict) -> Dataset:
    if d.get("format") != "microseg-dataset":
        raise SchemaError("not a dataset document")
    coeffs = CoefficientMatrix(tuple(d["coefficients"]["class_names"]),
                               np.array(d["coefficients"]["values"], dtype=np.float64))
    cs = d["customers"]
    if not cs:
        raise SchemaError("dataset has no customers")
    profiles = np.array([c["profiles"] for c in cs], dtype=np.float64)
    return Dataset(
        customer_ids=tuple(c["customer_id"] for c in cs),
        profiles=profiles,
        traits=np.array([c["traits"] for c in cs], dtype=np.float64),
        period_traits=np.array([c["period_traits"] for c in cs], dtype=np.float64),
        coefficients=coeffs,
        scaler=TraitScaler.from_dict(d["scaling"]),
        switch_period=np.array([c["switch_period"] if c["switch_period"] is not None else -1 for c in cs]),
        intended_dominant=np.array([c["intended_dominant"] for c in cs]),
        config=SynthConfig.from_dict(d["config"]) if d.get("config") else None,
    )


def write_dataset(path, ds: Dataset):
    write_json(path, dataset_to_dict(ds))


def read_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    return dataset_from_dict(read_json(path))


def write_trajectories(path, customer_ids, points):
    write_csv(path, TRAJECTORY_HEADER,
              ([cid, t + 1, *map(float, p)] for cid, traj in zip(customer_ids, points) for t, p in enumerate(traj)))


def read_trajectories(path):
    """Returns ``(customer_ids, points N x T x 3)``; steps must be complete and ordered."""
    rows = read_csv(path, TRAJECTORY_HEADER)
    ids, pts = [], {}
    for r in rows:
        if r[0] not in pts:
            ids.append(r[0])
            pts[r[0]] = []
        if int(r[1]) != len(pts[r[0]]) + 1:
            raise SchemaError(f"trajectory steps out of order for {r[0]}")
        pts[r[0]].append([float(v) for v in r[2:5]])
    return ids, np.array([pts[c] for c in ids])


def write_angles(path, customer_ids, angles, orders):
    write_csv(path, ANGLES_HEADER,
              ([cid, float(a[0]), float(a[1]), format_order(o)] for cid, a, o in zip(customer_ids, angles, orders)))


def read_angles(path):
    rows = read_csv(path, ANGLES_HEADER)
    ids = [r[0] for r in rows]
    angles = np.array([[float(r[1]) if r[1] else np.nan, float(r[2]) if r[2] else np.nan] for r in rows])
    orders = np.array([parse_order(r[3]) for r in rows])
    return ids, angles, orders
