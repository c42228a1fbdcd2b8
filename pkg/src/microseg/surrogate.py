"""Direction angles of trajectories and the linear surrogate that explains them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from microseg.domain import DEFAULT_NONZERO_THRESHOLD, N_TRAITS, CoefficientMatrix, nonzero_rows
from microseg.errors import DegenerateTrajectoryError, DimensionError, EmptyDatasetError

MIN_DISPLACEMENT = 1e-9
RANK_RCOND = 1e-10


@dataclass(frozen=True)
class DirectionAngles:
    theta: float   # azimuth in (-pi, pi]
    phi: float     # elevation in [-pi/2, pi/2]

    def unit_vector(self) -> np.ndarray:
        return angles_to_unit(np.array([[self.theta, self.phi]]))[0]


def displacement(points: np.ndarray, mode: str = "net") -> np.ndarray:
    """Direction vector(s) of trajectories.

    ``mode="net"`` is ``h_T - h_1``; ``mode="final"`` is ``h_T`` seen from
    the origin. Works on T x 3 or N x T x 3 arrays.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.shape[-1] != 3 or p.ndim not in (2, 3):
        raise DimensionError(f"trajectory points must be T x 3 or N x T x 3, got {p.shape}")
    if p.shape[-2] < 2:
        raise DimensionError("trajectory needs at least two points")
    if mode == "net":
        return p[..., -1, :] - p[..., 0, :]
    if mode == "final":
        return p[..., -1, :].copy()
    raise ValueError(f"unknown displacement mode {mode!r}")


def _wrap(theta):
    """Map angles into (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def vector_angles(d: np.ndarray, check: bool = True) -> np.ndarray:
    """(theta, phi) for each row of an N x 3 array of direction vectors.

    Rows shorter than 1e-9 raise :class:`DegenerateTrajectoryError` unless
    ``check`` is false, in which case they come back as NaN.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    norm = np.linalg.norm(d, axis=1)
    bad = ~(norm >= MIN_DISPLACEMENT)
    if check and bad.any():
        raise DegenerateTrajectoryError(f"{int(bad.sum())} trajectories have no net displacement")
    # Work on ratios to the larger horizontal component. Quotients are
    # correctly rounded, so exactly scaled inputs give identical angles.
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    m = np.maximum(np.abs(x), np.abs(y))
    flat = m == 0
    m = np.where(flat, 1.0, m)
    xr, yr = x / m, y / m
    theta = np.where(flat, 0.0, np.arctan2(yr, xr))
    # atan2 form of asin(d_z / |d|), well conditioned near the poles
    rho = np.sqrt(xr * xr + yr * yr)
    phi = np.where(flat, np.copysign(np.pi / 2, z), np.arctan2(z / m, rho))
    out = np.column_stack([_wrap(theta), phi])
    out[bad] = np.nan
    return out


def trajectory_angles(trajectory, mode: str = "net") -> DirectionAngles:
    points = getattr(trajectory, "points", trajectory)
    theta, phi = vector_angles(displacement(points, mode)[None])[0]
    return DirectionAngles(float(theta), float(phi))


def angles_to_unit(angles: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    th, ph = a[:, 0], a[:, 1]
    return np.column_stack([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th), np.sin(ph)])


def circular_mean(theta) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.arctan2(np.mean(np.sin(theta)), np.mean(np.cos(theta))))


def rotate_azimuth(angles: np.ndarray, offset: float) -> np.ndarray:
    """Shift azimuths by ``-offset`` and re-wrap; elevations are untouched."""
    a = np.array(angles, dtype=np.float64, copy=True)
    a[:, 0] = _wrap(a[:, 0] - offset)
    return a


def lstsq_min_norm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution by complete orthogonal decomposition.

    LAPACK ``gelsy`` (QR with column pivoting) decides the numerical rank with
    a relative tolerance of 1e-10, so exact collinearities are dropped.
    """
    x, _, _, _ = scipy.linalg.lstsq(A, B, cond=RANK_RCOND, lapack_driver="gelsy")
    return x


def _check_xy(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDatasetError("design matrix is empty")
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != X.shape[0]:
        raise DimensionError("X and Y have different row counts")
    return X, Y


@dataclass
class LinearSurrogate:
    """Affine map from spending shares to (rotated) direction angles.

    ``weights`` is K x 2; predictions live in the frame whose azimuth origin
    is ``rotation`` (the circular mean of the training azimuths).
    """

    weights: np.ndarray
    intercept: np.ndarray
    rotation: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    degree: int = 1

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return polynomial_features(X) if self.degree == 2 else X

    def predict(self, X) -> np.ndarray:
        """Predicted angles in the rotated frame."""
        return self.features(X) @ self.weights + self.intercept

    def predict_angles(self, X) -> np.ndarray:
        """Predicted angles in the original frame, azimuth wrapped to (-pi, pi]."""
        p = self.predict(X)
        if p.shape[1] == 2:
            p[:, 0] = _wrap(p[:, 0] + self.rotation)
        return p

    def to_dict(self) -> dict:
        return {"degree": self.degree, "weights": {"shape": list(self.weights.shape),
                                                   "data": self.weights.ravel().tolist()},
                "intercept": self.intercept.tolist(), "azimuth_rotation": self.rotation,
                "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSurrogate":
        w = np.array(d["weights"]["data"], dtype=np.float64).reshape(d["weights"]["shape"])
        return cls(w, np.array(d["intercept"], dtype=np.float64), float(d["azimuth_rotation"]),
                   dict(d.get("diagnostics", {})), int(d.get("degree", 1)))


def _fit(F, Y):
    # centring leaves the intercept out of the minimized norm
    f_mean = F.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Fc = F - f_mean
    # constant columns are collinear with the intercept; drop their roundoff
    scale = np.abs(F).max(axis=0) if F.shape[0] else np.zeros(F.shape[1])
    Fc[:, np.abs(Fc).max(axis=0) <= 1e-12 * scale] = 0.0
    w = lstsq_min_norm(Fc, Y - y_mean)
    return w, y_mean - f_mean @ w


def fit_linear(X, Y, rotate: bool | None = None) -> LinearSurrogate:
    """Ordinary least squares with intercept.

    Among all least-squares solutions the weights have minimum norm; the
    intercept is not penalized. When ``Y`` has two columns they are taken as
    (theta, phi) and the azimuth is first rotated so the circular mean of the
    training azimuths sits at zero.
    """
    X, Y = _check_xy(X, Y)
    rotation = 0.0
    if rotate is None:
        rotate = Y.shape[1] == 2
    if rotate:
        rotation = circular_mean(Y[:, 0])
        Y = rotate_azimuth(Y, rotation)
    w, b = _fit(X, Y)
    s = LinearSurrogate(w, b, rotation)
    s.diagnostics["r2_train"] = r_squared(s.predict(X), Y) if X.shape[0] >= 2 else float("nan")
    return s


def polynomial_features(X: np.ndarray) -> np.ndarray:
    """Linear terms followed by all squares and pairwise products (i <= j)."""
    X = np.asarray(X, dtype=np.float64)
    i, j = np.triu_indices(X.shape[1])
    return np.hstack([X, X[:, i] * X[:, j]])


def fit_polynomial_baseline(X, Y, degree: int = 2, rotate: bool | None = None) -> LinearSurrogate:
    if degree != 2:
        raise ValueError("only degree 2 is supported")
    X, Y = _check_xy(X, Y)
    s = fit_linear(polynomial_features(X), Y, rotate=rotate)
    s.degree = 2
    return s


def r_squared(predictions, truth) -> float:
    """Coefficient of determination pooled over all output columns.

    A constant target gives 1.0 when it is reproduced exactly and ``-inf``
    otherwise.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if t.shape[0] < 2:
        raise EmptyDatasetError("R^2 needs at least two rows")
    if t.ndim == 1:
        p, t = p[:, None], t[:, None]
    ss_res = float(np.sum((t - p) ** 2))
    ss_tot = float(np.sum((t - t.mean(axis=0)) ** 2))
    if ss_tot < 1e-12:
        return 1.0 if ss_res < 1e-12 else float("-inf")
    return 1.0 - ss_res / ss_tot


def r_squared_per_column(predictions, truth) -> list:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    return [r_squared(p[:, j], t[:, j]) for j in range(t.shape[1])]


@dataclass
class FidelityReport:
    r2_test: float
    r2_train: float
    r2_polynomial_test: float
    nonzero_count: int
    coefficient_correlations: list          # 5 x 2, None where unavailable
    r2_test_per_angle: list = field(default_factory=list)
    r2_polynomial_train: float = float("nan")
    nonzero_entries: int = 0
    jointly_nonzero_rows: int = 0
    coefficient_nonzero_rows: int = 0

    def max_abs_correlation(self) -> list:
        """Largest |r| over traits for each angle column (None if no entry)."""
        out = []
        for j in range(2):
            vals = [abs(row[j]) for row in self.coefficient_correlations if row[j] is not None]
            out.append(max(vals) if vals else None)
        return out

    def to_dict(self) -> dict:
        return {
            "r2_test": self.r2_test,
            "r2_train": self.r2_train,
            "r2_polynomial_test": self.r2_polynomial_test,
            "nonzero_count": self.nonzero_count,
            "coefficient_correlations": self.coefficient_correlations,
            "r2_test_per_angle": self.r2_test_per_angle,
            "r2_polynomial_train": self.r2_polynomial_train,
            "nonzero_entries": self.nonzero_entries,
            "jointly_nonzero_rows": self.jointly_nonzero_rows,
            "coefficient_nonzero_rows": self.coefficient_nonzero_rows,
        }


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0:
        return None
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0))


def coefficient_correlations(weights: np.ndarray, coeffs: CoefficientMatrix,
                             threshold: float = DEFAULT_NONZERO_THRESHOLD):
    """5 x 2 Pearson table between trait columns and surrogate weight columns.

    Only rows non-zero in both matrices take part; with fewer than three
    such rows every entry is None. Returns ``(table, n_joint_rows)``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != coeffs.k:
        raise DimensionError("surrogate and coefficient matrix disagree on K")
    joint = nonzero_rows(weights, threshold) & coeffs.nonzero_rows(threshold)
    n_joint = int(joint.sum())
    table = [[None] * weights.shape[1] for _ in range(N_TRAITS)]
    if n_joint >= 3:
        for i in range(N_TRAITS):
            for j in range(weights.shape[1]):
                table[i][j] = _pearson(coeffs.values[joint, i], weights[joint, j])
    return table, n_joint


def evaluate_fidelity(surrogate: LinearSurrogate, coeffs: CoefficientMatrix, X_test, Y_test,
                      polynomial: LinearSurrogate | None = None,
                      threshold: float = DEFAULT_NONZERO_THRESHOLD) -> FidelityReport:
    """Score a fitted surrogate on held-out customers.

    ``Y_test`` holds angles in the original frame; they are rotated with the
    surrogate's stored offset before comparison.
    """
    X_test, Y_test = _check_xy(X_test, Y_test)
    if surrogate.weights.shape[0] != coeffs.k:
        raise DimensionError("surrogate and coefficient matrix disagree on K")
    truth = rotate_azimuth(Y_test, surrogate.rotation) if Y_test.shape[1] == 2 else Y_test
    pred = surrogate.predict(X_test)
    r2_poly = r2_poly_train = float("nan")
    if polynomial is not None:
        poly_truth = rotate_azimuth(Y_test, polynomial.rotation) if Y_test.shape[1] == 2 else Y_test
        r2_poly = r_squared(polynomial.predict(X_test), poly_truth)
        r2_poly_train = polynomial.diagnostics.get("r2_train", float("nan"))
    mask = nonzero_rows(surrogate.weights, threshold)
    table, n_joint = coefficient_correlations(surrogate.weights, coeffs, threshold)
    w = surrogate.weights
    return FidelityReport(
        r2_test=r_squared(pred, truth),
        r2_train=surrogate.diagnostics.get("r2_train", float("nan")),
        r2_polynomial_test=r2_poly,
        nonzero_count=int(mask.sum()),
        coefficient_correlations=table,
        r2_test_per_angle=r_squared_per_column(pred, truth),
        r2_polynomial_train=r2_poly_train,
        nonzero_entries=int(np.sum(np.abs(w) >= threshold * np.mean(np.abs(w)))) if np.any(w) else 0,
        jointly_nonzero_rows=n_joint,
        coefficient_nonzero_rows=int(coeffs.nonzero_rows(threshold).sum()),
    )
