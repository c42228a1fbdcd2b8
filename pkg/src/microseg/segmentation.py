"""Hierarchical trait-ordered segments, k-means purity, window stability and course changes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from microseg.domain import format_order, parse_order
from microseg.errors import ConfigError, DimensionError
from microseg.rnn import trajectory_points
from microseg.surrogate import angles_to_unit, circular_mean, displacement, rotate_azimuth, vector_angles

log = logging.getLogger(__name__)

MAX_DEPTH = 4
N_RESTARTS = 20
N_PERMUTATIONS = 20
MIN_STEP = 1e-12


def kmeans_labels(points, k: int, seed: int = 0, n_init: int = N_RESTARTS) -> np.ndarray:
    """Cluster assignments from seeded k-means++ with ``n_init`` restarts."""
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if points.shape[0] < k:
        raise ConfigError(f"need at least k={k} points, got {points.shape[0]}")
    if k == 1:
        return np.zeros(points.shape[0], dtype=np.int64)
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed % 2**32)
    return km.fit_predict(points).astype(np.int64)


def purity_score(clusters, labels) -> float:
    """Sum over clusters of the modal label count, divided by N."""
    clusters = np.asarray(clusters)
    _, lab = np.unique(np.asarray(labels), return_inverse=True)
    total = 0
    for c in np.unique(clusters):
        total += np.bincount(lab[clusters == c]).max()
    return total / len(lab)


def geometric_purity(angles, labels, k: int, seed: int = 0) -> float:
    """Purity of a k-means partition of (theta, phi) points against labels.

    Azimuths are expected in the frame set by the surrogate's rotation, so
    the cut at +-pi falls away from the data.
    """
    return purity_score(kmeans_labels(angles, k, seed), labels)


def permutation_null(clusters, labels, seed: int = 0, n_permutations: int = N_PERMUTATIONS) -> float:
    """Mean purity of a fixed partition against shuffled labels."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    return float(np.mean([purity_score(clusters, rng.permutation(labels))
                          for _ in range(n_permutations)]))


def angle_centroid(angles) -> tuple:
    """Circular mean azimuth and arithmetic mean elevation."""
    a = np.asarray(angles, dtype=np.float64)
    return circular_mean(a[:, 0]), float(np.mean(a[:, 1]))


@dataclass
class ClusterNode:
    key: tuple
    members: list
    centroid: tuple
    purity: float | None = None        # k-means purity against the next trait down
    null_purity: float | None = None
    n_subclusters: int = 0

    @property
    def depth(self) -> int:
        return len(self.key)

    @property
    def purity_excess(self) -> float | None:
        if self.purity is None:
            return None
        return self.purity - self.null_purity

    def to_dict(self) -> dict:
        return {
            "key": [format_order((i,)) for i in self.key],
            "depth": self.depth,
            "member_count": len(self.members),
            "centroid": {"theta": self.centroid[0], "phi": self.centroid[1]},
            "purity": self.purity,
            "null_purity": self.null_purity,
            "n_subclusters": self.n_subclusters,
            "members": list(self.members),
        }


@dataclass
class ClusterTree:
    """Nodes keyed by dominant-order prefixes of length 1..depth."""

    nodes: dict = field(default_factory=dict)
    depth: int = 1

    def level(self, depth: int) -> list:
        return [n for k, n in sorted(self.nodes.items()) if len(k) == depth]

    def children(self, key: tuple) -> list:
        return [n for k, n in sorted(self.nodes.items())
                if len(k) == len(key) + 1 and k[:len(key)] == tuple(key)]

    def level_summary(self, min_members: int = 100) -> dict:
        """Purity and null per parent level, over nodes with enough members.

        Level ``d`` compares the nodes at depth ``d - 1`` against the d-th
        most dominant trait (d = 2..depth).
        """
        out = {}
        for d in range(2, self.depth + 1):
            parents = [n for n in self.level(d - 1)
                       if n.purity is not None and len(n.members) >= min_members]
            out[d] = {
                "nodes": [format_order(n.key) for n in parents],
                "purity": [n.purity for n in parents],
                "null_purity": [n.null_purity for n in parents],
                "min_excess": min((n.purity_excess for n in parents), default=None),
                "mean_excess": float(np.mean([n.purity_excess for n in parents])) if parents else None,
            }
        return out

    def to_dict(self) -> dict:
        def nest(key):
            node = self.nodes[key].to_dict()
            node["children"] = [nest(c.key) for c in self.children(key)]
            return node
        return {"depth": self.depth, "nodes": [nest(n.key) for n in self.level(1)]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterTree":
        tree = cls(depth=int(d["depth"]))

        def walk(node):
            key = parse_order(">".join(node["key"]))
            tree.nodes[key] = ClusterNode(key, list(node["members"]),
                                          (node["centroid"]["theta"], node["centroid"]["phi"]),
                                          node.get("purity"), node.get("null_purity"),
                                          node.get("n_subclusters", 0))
            for child in node["children"]:
                walk(child)
        for n in d["nodes"]:
            walk(n)
        return tree


def build_hierarchy(customer_ids, angles, orders, depth: int = MAX_DEPTH, seed: int = 0,
                    with_purity: bool = True, min_purity_members: int = 10) -> ClusterTree:
    """Group customers by dominant-order prefixes.

    Depth 1 splits by the most dominant trait and every further level by the
    next trait in the order. With ``with_purity`` each node that has at least
    ``min_purity_members`` members also gets a k-means purity against the next
    trait down (k = number of children) and its permutation null. Each node is
    clustered in a frame whose azimuth origin is the node's circular mean.
    """
    if not 1 <= depth <= MAX_DEPTH:
        raise ConfigError(f"depth must lie in [1, {MAX_DEPTH}], got {depth}")
    angles = np.asarray(angles, dtype=np.float64)
    orders = np.asarray(orders)
    ids = list(customer_ids)
    if not (len(ids) == angles.shape[0] == orders.shape[0]):
        raise DimensionError("customer ids, angles and orders must cover the same customers")
    tree = ClusterTree(depth=depth)
    groups: dict = {}
    for i, order in enumerate(orders):
        for d in range(1, depth + 1):
            groups.setdefault(tuple(int(t) for t in order[:d]), []).append(i)
    for key, idx in sorted(groups.items()):
        idx = np.array(idx)
        tree.nodes[key] = ClusterNode(key, [ids[i] for i in idx], angle_centroid(angles[idx]))
    if with_purity:
        for key, node in sorted(tree.nodes.items()):
            if len(key) >= MAX_DEPTH:
                continue
            idx = np.array(groups[key])
            nxt = orders[idx, len(key)]
            k = len(np.unique(nxt))
            node.n_subclusters = k
            if k < 2 or len(idx) < max(min_purity_members, k):
                continue
            node_seed = seed + 1000 * len(key) + sum(t * 5 ** j for j, t in enumerate(key))
            # centre the node on its own azimuth so it never straddles the +-pi cut
            local = rotate_azimuth(angles[idx], node.centroid[0])
            clusters = kmeans_labels(local, k, node_seed)
            node.purity = purity_score(clusters, nxt)
            node.null_purity = permutation_null(clusters, nxt, node_seed)
    return tree


def window_sequences(profiles, window: int) -> np.ndarray:
    """Resample the last ``window`` periods onto the full T steps.

    Step j uses period ``T - window + floor(j * window / T)``, so
    ``window == T`` is the original history and ``window == 1`` repeats the
    final period T times.
    """
    p = np.asarray(profiles)
    t_len = p.shape[1]
    if not 1 <= window <= t_len:
        raise ConfigError(f"window must lie in [1, {t_len}], got {window}")
    src = t_len - window + (np.arange(t_len) * window) // t_len
    return p[:, src]


@dataclass
class StabilityReport:
    agreement_rate: float
    divergence: np.ndarray           # radians, NaN for excluded customers
    coarse_cluster: np.ndarray       # dominant trait index of nearest centroid, -1 if excluded
    fine_cluster: np.ndarray
    customer_ids: list
    n_excluded: int = 0

    def rows(self):
        for cid, c, f, dv in zip(self.customer_ids, self.coarse_cluster, self.fine_cluster, self.divergence):
            yield cid, int(c), int(f), float(dv)


def nearest_centroid(angles, centroids: dict) -> np.ndarray:
    """Key of the closest centroid on the sphere for each (theta, phi) row."""
    keys = sorted(centroids)
    cu = angles_to_unit(np.array([centroids[k] for k in keys]))
    u = angles_to_unit(angles)
    return np.array([keys[j] for j in np.argmax(u @ cu.T, axis=1)])


def stability_check(model, dataset, coarse: int, fine: int, mode: str = "net",
                    customers=None) -> StabilityReport:
    """Compare depth-1 segment assignments between two aggregation windows.

    Both trajectory sets are mapped to the nearest depth-1 centroid of the
    coarse-window hierarchy. Customers with a degenerate trajectory in either
    window are excluded and counted.
    """
    idx = np.arange(dataset.n_customers) if customers is None else np.asarray(customers)
    profiles = dataset.profiles[idx]
    a_coarse = vector_angles(displacement(trajectory_points(model, window_sequences(profiles, coarse)), mode),
                             check=False)
    a_fine = vector_angles(displacement(trajectory_points(model, window_sequences(profiles, fine)), mode),
                           check=False)
    ok = np.all(np.isfinite(a_coarse), axis=1) & np.all(np.isfinite(a_fine), axis=1)
    ids = [dataset.customer_ids[i] for i in idx]
    dominant = dataset.orders[idx, 0]
    centroids = {}
    for t in np.unique(dominant[ok]):
        centroids[int(t)] = angle_centroid(a_coarse[ok & (dominant == t)])
    coarse_c = np.full(len(idx), -1)
    fine_c = np.full(len(idx), -1)
    div = np.full(len(idx), np.nan)
    if ok.any():
        coarse_c[ok] = nearest_centroid(a_coarse[ok], centroids)
        fine_c[ok] = nearest_centroid(a_fine[ok], centroids)
        cos = np.sum(angles_to_unit(a_coarse[ok]) * angles_to_unit(a_fine[ok]), axis=1)
        div[ok] = np.arccos(np.clip(cos, -1.0, 1.0))
    agreement = float(np.mean(coarse_c[ok] == fine_c[ok])) if ok.any() else float("nan")
    n_excluded = int((~ok).sum())
    if n_excluded:
        log.info("stability: %d degenerate trajectories excluded", n_excluded)
    return StabilityReport(agreement, div, coarse_c, fine_c, ids, n_excluded)


def turning_angles(points) -> tuple:
    """Angles between successive non-zero steps of a trajectory.

    Step t is ``points[t] - points[t-1]``. Returns ``(angles, skipped)`` where
    ``angles[t]`` is the turn from the previous valid step into step t (NaN
    where undefined) and ``skipped`` lists zero-length steps.
    """
    p = np.asarray(points, dtype=np.float64)
    steps = np.diff(p, axis=0)
    out = np.full(p.shape[0], np.nan)
    skipped = []
    prev = None
    for t in range(1, p.shape[0]):
        s = steps[t - 1]
        n = np.linalg.norm(s)
        if n < MIN_STEP:
            skipped.append(t)
            continue
        if prev is not None:
            out[t] = math.acos(float(np.clip(np.dot(prev, s / n), -1.0, 1.0)))
        prev = s / n
    return out, skipped


def detect_course_change(trajectory, threshold: float = math.pi / 4):
    """Earliest period whose step turns away from the previous step by more than ``threshold``.

    Points are indexed by period (0 = state after the first period). Returns
    None when the trajectory never turns that sharply.
    """
    points = getattr(trajectory, "points", trajectory)
    if np.asarray(points).shape[0] < 3:
        raise ConfigError("course-change detection needs at least three points")
    angles, skipped = turning_angles(points)
    if skipped:
        log.debug("skipped zero-length steps %s", skipped)
    hits = np.nonzero(angles > threshold)[0]
    return int(hits[0]) if hits.size else None
