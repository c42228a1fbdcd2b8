"""A three-unit LSTM with exact backpropagation through time.

The network reads T spending profiles and regresses the five trait grades
from its final hidden state. The hidden states h_1..h_T form the customer's
trajectory in a 3-D state space.

Gates are stacked in the order input, forget, output, candidate:

    i = sigmoid(W_i x + U_i h + b_i)     f = sigmoid(W_f x + U_f h + b_f)
    o = sigmoid(W_o x + U_o h + b_o)     g = tanh(W_g x + U_g h + b_g)
    c_t = f * c_{t-1} + i * g            h_t = o * tanh(c_t)
    y = W_out h_T + b_out
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from microseg.domain import N_TRAITS
from microseg.errors import CacheError, ConfigError, DimensionError, DivergenceError

log = logging.getLogger(__name__)

HIDDEN = 3
GATES = ("input", "forget", "output", "candidate")
FORGET = GATES.index("forget")
PARAM_NAMES = ("W", "U", "b", "W_out", "b_out")
DECAYED = (True, True, False, True, False)


def sigmoid(z):
    return expit(z)


@dataclass
class LstmModel:
    """LSTM(3) parameters.

    ``W`` is 4 x 3 x K, ``U`` is 4 x 3 x 3 and ``b`` is 4 x 3, each stacked in
    :data:`GATES` order. The same class doubles as the gradient container.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    input_scale: float = 1.0

    def __post_init__(self):
        self.input_scale = float(self.input_scale)
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k = self.W.shape[-1]
        expected = {"W": (4, HIDDEN, k), "U": (4, HIDDEN, HIDDEN), "b": (4, HIDDEN),
                    "W_out": (N_TRAITS, HIDDEN), "b_out": (N_TRAITS,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def k(self) -> int:
        return self.W.shape[-1]

    def gate(self, name: str):
        """``(W_g, U_g, b_g)`` views for one gate."""
        g = GATES.index(name)
        return self.W[g], self.U[g], self.b[g]

    def params(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "LstmModel":
        return LstmModel(*(p.copy() for p in self.params()), input_scale=self.input_scale)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    def digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        h.update(np.float64(self.input_scale).tobytes())
        return h.digest()

    @classmethod
    def zeros(cls, k: int, input_scale: float = 1.0) -> "LstmModel":
        return cls(np.zeros((4, HIDDEN, k)), np.zeros((4, HIDDEN, HIDDEN)), np.zeros((4, HIDDEN)),
                   np.zeros((N_TRAITS, HIDDEN)), np.zeros(N_TRAITS), input_scale)

    @classmethod
    def initialize(cls, k: int, rng, scale: float = 0.2, forget_bias: float = 1.0,
                   input_scale: float = 1.0) -> "LstmModel":
        """Uniform [-scale, scale] weights, zero biases except the forget gate."""
        m = cls(rng.uniform(-scale, scale, (4, HIDDEN, k)),
                rng.uniform(-scale, scale, (4, HIDDEN, HIDDEN)),
                np.zeros((4, HIDDEN)),
                rng.uniform(-scale, scale, (N_TRAITS, HIDDEN)),
                np.zeros(N_TRAITS),
                input_scale)
        m.b[FORGET] = forget_bias
        return m

    def to_dict(self) -> dict:
        d = {n: {"shape": list(p.shape), "data": p.ravel().tolist()}
             for n, p in zip(PARAM_NAMES, self.params())}
        d["input_scale"] = self.input_scale
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LstmModel":
        return cls(*(np.array(d[n]["data"], dtype=np.float64).reshape(d[n]["shape"])
                     for n in PARAM_NAMES), input_scale=d.get("input_scale", 1.0))


@dataclass
class ForwardCache:
    digest: bytes
    x: np.ndarray
    h: list        # h_0..h_T
    c: list        # c_0..c_T
    gates: list    # per step, N x 4 x 3 activations


def _as_batch(sequences):
    x = np.asarray(sequences, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise DimensionError(f"expected T x K or N x T x K input, got shape {x.shape}")
    return x, False


def forward(model: LstmModel, sequences):
    """Run the recurrence from h_0 = c_0 = 0.

    ``sequences`` is T x K or N x T x K spending shares; they are multiplied
    by ``model.input_scale`` before entering the gates. Returns ``(points, prediction,
    cache)`` where points holds h_1..h_T (T x 3 or N x T x 3).
    """
    x, single = _as_batch(sequences)
    x = x * model.input_scale
    hs, cs, gates = _recurrence(model, x)
    points = np.stack(hs[1:], axis=1)
    pred = hs[-1] @ model.W_out.T + model.b_out
    cache = ForwardCache(model.digest(), x, hs, cs, gates)
    if single:
        return points[0], pred[0], cache
    return points, pred, cache


def _recurrence(model: LstmModel, x):
    """States h_0..h_T, c_0..c_T and gate activations for scaled inputs ``x``."""
    n, t_len, k = x.shape
    if t_len < 1:
        raise DimensionError("sequence must have at least one step")
    if k != model.k:
        raise DimensionError(f"input has {k} classes, model expects {model.k}")
    wx = (x @ model.W.reshape(4 * HIDDEN, k).T).reshape(n, t_len, 4, HIDDEN) + model.b
    u = model.U.reshape(4 * HIDDEN, HIDDEN).T
    h = np.zeros((n, HIDDEN))
    c = np.zeros((n, HIDDEN))
    hs, cs, gates = [h], [c], []
    for t in range(t_len):
        a = wx[:, t] + (h @ u).reshape(n, 4, HIDDEN)
        act = np.empty_like(a)
        act[:, :3] = sigmoid(a[:, :3])
        act[:, 3] = np.tanh(a[:, 3])
        c = act[:, FORGET] * c + act[:, 0] * act[:, 3]
        h = act[:, 2] * np.tanh(c)
        hs.append(h)
        cs.append(c)
        gates.append(act)
    return hs, cs, gates


def backward(model: LstmModel, cache: ForwardCache, d_prediction) -> LstmModel:
    """Gradients of the loss w.r.t. every parameter, given dL/dy."""
    if cache.digest != model.digest():
        raise CacheError("cache was produced by a different model state")
    dy = np.asarray(d_prediction, dtype=np.float64)
    x = cache.x
    n = x.shape[0]
    if dy.ndim == 1:
        dy = dy[None]
    if dy.shape != (n, N_TRAITS):
        raise CacheError(f"d_prediction shape {dy.shape} does not match cached batch of {n}")

    grad = LstmModel.zeros(model.k, model.input_scale)
    h_last = cache.h[-1]
    grad.W_out = dy.T @ h_last
    grad.b_out = dy.sum(axis=0)
    dh = dy @ model.W_out
    dc = np.zeros_like(dh)
    da = np.empty((n, 4, HIDDEN))
    for t in range(x.shape[1] - 1, -1, -1):
        act = cache.gates[t]
        i, f, o, g = act[:, 0], act[:, 1], act[:, 2], act[:, 3]
        tc = np.tanh(cache.c[t + 1])
        dc = dc + dh * o * (1.0 - tc * tc)
        da[:, 0] = dc * g * i * (1.0 - i)
        da[:, 1] = dc * cache.c[t] * f * (1.0 - f)
        da[:, 2] = dh * tc * o * (1.0 - o)
        da[:, 3] = dc * i * (1.0 - g * g)
        grad.W += np.einsum("ngj,nk->gjk", da, x[:, t])
        grad.U += np.einsum("ngj,nl->gjl", da, cache.h[t])
        grad.b += da.sum(axis=0)
        dh = np.einsum("ngj,gjl->nl", da, model.U)
        dc = dc * f
    return grad


def sse_loss(model: LstmModel, x, y):
    """Sum of squared errors and its prediction gradient."""
    _, pred, cache = forward(model, x)
    r = pred - y
    return float(np.sum(r * r)), 2.0 * r, cache


def _sse(model: LstmModel, xs, y) -> float:
    # loss only, on pre-scaled inputs; no cache bookkeeping
    hs, _, _ = _recurrence(model, xs)
    r = hs[-1] @ model.W_out.T + model.b_out - y
    return float(np.sum(r * r))


def gradient_check(model: LstmModel, batch, epsilon: float = 1e-5, grad_fn=None) -> float:
    """Max relative error between backprop and central differences.

    ``batch`` is ``(x, y)``; the loss is the sum of squared errors.
    ``grad_fn(model, x, y)`` may replace the analytic gradient (used to inject
    faults in tests).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError("epsilon must lie in [1e-7, 1e-3]")
    x, y = batch
    if grad_fn is None:
        def grad_fn(m, x, y):
            _, dpred, cache = sse_loss(m, x, y)
            return backward(m, cache, dpred)
    analytic = grad_fn(model, x, y)
    probe = model.copy()
    xs = _as_batch(x)[0] * model.input_scale
    worst = 0.0
    for name in PARAM_NAMES:
        p = getattr(probe, name)
        a = getattr(analytic, name)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = _sse(probe, xs, y)
            flat[j] = orig - epsilon
            lm = _sse(probe, xs, y)
            flat[j] = orig
            num = (lp - lm) / (2 * epsilon)
            ana = a.reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def random_gradcheck_problem(seed: int, k: int = 97, t_len: int = 6, batch: int = 8):
    """Random model and batch for gradient verification.

    Inputs are Dirichlet shares with input scale K, so every entry is of
    order one; input weights shrink with 1/sqrt(K) to keep the gates out of
    saturation.
    """
    rng = np.random.default_rng(seed)
    model = LstmModel.initialize(k, rng, scale=0.5 / np.sqrt(k), input_scale=float(k))
    model.U = rng.uniform(-0.5, 0.5, model.U.shape)
    model.b = rng.uniform(-0.5, 0.5, model.b.shape)
    model.W_out = rng.uniform(-1.0, 1.0, model.W_out.shape)
    model.b_out = rng.uniform(-0.5, 0.5, N_TRAITS)
    x = rng.dirichlet(np.ones(k), size=(batch, t_len))
    y = rng.uniform(0, 1, (batch, N_TRAITS))
    return model, (x, y)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 300
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    forget_bias_init: float = 1.0
    weight_init_scale: float = 0.2
    seed: int = 0
    train_fraction: float = 0.8
    optimizer: str = "adam"
    input_scale: float | None = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("learning_rate, epochs and batch_size must be positive")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_init_scale <= 0 or self.adam_eps <= 0:
            raise ConfigError("weight_init_scale and adam_eps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainingReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    initial_val_mse: float = float("nan")
    val_r2: list = field(default_factory=list)
    label_variance: float = float("nan")
    train_idx: list = field(default_factory=list)
    val_idx: list = field(default_factory=list)

    @property
    def final_val_mse(self) -> float:
        return self.val_mse[-1]

    def summary(self) -> dict:
        return {
            "initial_val_mse": self.initial_val_mse,
            "final_train_mse": self.train_mse[-1],
            "final_val_mse": self.final_val_mse,
            "val_label_variance": self.label_variance,
            "val_r2_per_trait": list(self.val_r2),
            "epochs": len(self.val_mse),
        }


def split_indices(n: int, train_fraction: float, seed: int):
    """Seeded customer split; both parts sorted."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1) if n > 1 else n
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def mse(model: LstmModel, x, y) -> float:
    _, pred, _ = forward(model, x)
    return float(np.mean((pred - y) ** 2))


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, decay_mask=None):
        cfg = self.cfg
        self.t += 1
        c1 = 1 - cfg.adam_beta1 ** self.t
        c2 = 1 - cfg.adam_beta2 ** self.t
        for j, (p, g, m, v) in enumerate(zip(params, grads, self.m, self.v)):
            if cfg.weight_decay and decay_mask[j]:
                p *= 1.0 - cfg.learning_rate * cfg.weight_decay
            m *= cfg.adam_beta1
            m += (1 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1 - cfg.adam_beta2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        p -= lr * g


def train_arrays(x, y, config: TrainConfig, train_idx=None, val_idx=None):
    """Fit an LSTM(3) to ``x`` (N x T x K) and ``y`` (N x 5) by minibatch MSE.

    Returns ``(model, report)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ConfigError("need at least two customers to train")
    if train_idx is None:
        train_idx, val_idx = split_indices(n, config.train_fraction, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    k = x.shape[2]
    input_scale = float(k) if config.input_scale is None else float(config.input_scale)
    model = LstmModel.initialize(k, rng, config.weight_init_scale, config.forget_bias_init,
                                 input_scale=input_scale)
    model.b_out = y[train_idx].mean(axis=0)
    xt, yt, xv, yv = x[train_idx], y[train_idx], x[val_idx], y[val_idx]

    report = TrainingReport(train_idx=[int(i) for i in train_idx], val_idx=[int(i) for i in val_idx])
    report.label_variance = float(np.mean(yv.var(axis=0)))
    report.initial_val_mse = mse(model, xv, yv)
    params = model.params()
    adam = _Adam(params, config) if config.optimizer == "adam" else None
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            _, pred, cache = forward(model, xt[b])
            dpred = 2.0 * (pred - yt[b]) / (len(b) * N_TRAITS)
            grads = backward(model, cache, dpred).params()
            if adam is not None:
                adam.step(params, grads, DECAYED)
            else:
                _sgd_step(params, grads, config.learning_rate)
        tr, va = mse(model, xt, yt), mse(model, xv, yv)
        if not (np.isfinite(tr) and np.isfinite(va) and model.is_finite()):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        report.train_mse.append(tr)
        report.val_mse.append(va)
        if epoch % 50 == 0:
            log.debug("epoch %d train %.6f val %.6f", epoch, tr, va)
    _, pv, _ = forward(model, xv)
    ss_res = ((pv - yv) ** 2).sum(axis=0)
    ss_tot = ((yv - yv.mean(axis=0)) ** 2).sum(axis=0)
    report.val_r2 = [float(1 - r / s) if s > 0 else float("nan") for r, s in zip(ss_res, ss_tot)]
    return model, report


def train(dataset, config: TrainConfig):
    """Train on a :class:`~microseg.synth.Dataset` (profiles -> customer trait grades)."""
    return train_arrays(dataset.profiles, dataset.traits, config)


@dataclass(frozen=True)
class Trajectory:
    customer_id: str
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != HIDDEN:
            raise DimensionError(f"trajectory points must be T x {HIDDEN}")
        if p.shape[0] < 2:
            raise DimensionError("trajectory needs at least two points")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "points", p)


def trajectory_points(model: LstmModel, sequences) -> np.ndarray:
    points, _, _ = forward(model, sequences)
    return points


def extract_trajectories(model: LstmModel, dataset) -> list:
    points = trajectory_points(model, dataset.profiles)
    return [Trajectory(cid, p) for cid, p in zip(dataset.customer_ids, points)]
