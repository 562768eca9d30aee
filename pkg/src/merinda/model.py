"""GRU encoder, dense coefficient head and the differentiable ODE loss.

Everything here works on batches: a leading batch axis B is carried through
the GRU, the head and the unrolled RK4 solve, and the backward pass returns
gradients summed over the batch.

Shapes used throughout::

    V   hidden size            I   GRU input size (n states + m inputs)
    n   states                 m   inputs (= number of shift outputs)
    P   library terms          k   window length (samples)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GradientOverflow
from .library import PolynomialLibrary, evaluate, features_vjp

PARAM_NAMES = ("W_r", "W_z", "W_a", "b_r", "b_z", "b_a", "W_head", "b_head")
DIVERGED_LOSS = 1e12
OVERFLOW_GUARD = 1e12


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class GruModel:
    hidden_size: int
    input_size: int
    n_coefficients: int
    n_shifts: int
    W_r: np.ndarray
    W_z: np.ndarray
    W_a: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    b_a: np.ndarray
    W_head: np.ndarray
    b_head: np.ndarray

    @classmethod
    def initialize(cls, hidden_size, input_size, n_coefficients, n_shifts, rng) -> "GruModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        v, fan = hidden_size, hidden_size + input_size
        out = n_coefficients + n_shifts
        g = 1.0 / np.sqrt(fan)
        hd = 1.0 / np.sqrt(v)
        return cls(
            hidden_size, input_size, n_coefficients, n_shifts,
            W_r=rng.uniform(-g, g, (v, fan)),
            W_z=rng.uniform(-g, g, (v, fan)),
            W_a=rng.uniform(-g, g, (v, fan)),
            b_r=rng.uniform(-g, g, v),
            b_z=rng.uniform(-g, g, v),
            b_a=rng.uniform(-g, g, v),
            W_head=rng.uniform(-hd, hd, (out, v)),
            b_head=rng.uniform(-hd, hd, out),
        )

    def __post_init__(self):
        v, fan = self.hidden_size, self.hidden_size + self.input_size
        out = self.n_coefficients + self.n_shifts
        expected = {
            "W_r": (v, fan), "W_z": (v, fan), "W_a": (v, fan),
            "b_r": (v,), "b_z": (v,), "b_a": (v,),
            "W_head": (out, v), "b_head": (out,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def output_size(self) -> int:
        return self.n_coefficients + self.n_shifts

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GruModel":
        return GruModel(self.hidden_size, self.input_size, self.n_coefficients, self.n_shifts,
                        **{k: v.copy() for k, v in self.params().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())


# ---------------------------------------------------------------------------
# GRU


def gru_cell_forward(model: GruModel, a_prev, x_t):
    """One GRU step. Works on a single vector or a (B, .) batch.

    The cell state is the hidden state: c_prev = a_prev and a_t = c_t.
    """
    a_prev = np.asarray(a_prev, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    concat = np.concatenate([a_prev, x_t], axis=-1)
    r = sigmoid(concat @ model.W_r.T + model.b_r)
    z = sigmoid(concat @ model.W_z.T + model.b_z)
    mod = np.concatenate([r * a_prev, x_t], axis=-1)
    cc = np.tanh(mod @ model.W_a.T + model.b_a)
    c = z * cc + (1.0 - z) * a_prev
    cache = {"a_prev": a_prev, "concat": concat, "mod": mod, "r": r, "z": z, "cc": cc, "c": c}
    return c, cache


def gru_sequence_forward(model: GruModel, window):
    """Fold the cell over a (k, I) window, or a (B, k, I) batch, from a zero state."""
    window = np.asarray(window, dtype=float)
    a = np.zeros(window.shape[:-2] + (model.hidden_size,))
    caches = []
    for t in range(window.shape[-2]):
        a, cache = gru_cell_forward(model, a, window[..., t, :])
        caches.append(cache)
    return a, caches


def gru_sequence_backward(model: GruModel, caches, grad_hidden):
    """BPTT from the gradient of the final hidden state."""
    v = model.hidden_size
    grads = {name: np.zeros_like(getattr(model, name)) for name in ("W_r", "W_z", "W_a", "b_r", "b_z", "b_a")}
    g_a = np.asarray(grad_hidden, dtype=float)
    batch_axes = tuple(range(g_a.ndim - 1))
    for cache in reversed(caches):
        a_prev, z, r, cc = cache["a_prev"], cache["z"], cache["r"], cache["cc"]
        g_z = g_a * (cc - a_prev)
        g_pre_c = g_a * z * (1.0 - cc * cc)
        g_prev = g_a * (1.0 - z)
        grads["W_a"] += _outer_sum(g_pre_c, cache["mod"])
        grads["b_a"] += g_pre_c.sum(axis=batch_axes)
        g_mod = g_pre_c @ model.W_a[:, :v]
        g_prev += g_mod * r
        g_pre_r = g_mod * a_prev * r * (1.0 - r)
        g_pre_z = g_z * z * (1.0 - z)
        grads["W_r"] += _outer_sum(g_pre_r, cache["concat"])
        grads["b_r"] += g_pre_r.sum(axis=batch_axes)
        grads["W_z"] += _outer_sum(g_pre_z, cache["concat"])
        grads["b_z"] += g_pre_z.sum(axis=batch_axes)
        g_prev += g_pre_r @ model.W_r[:, :v] + g_pre_z @ model.W_z[:, :v]
        g_a = g_prev
    return grads


def _outer_sum(a, b):
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def flow_identity_residual(cache) -> np.ndarray:
    """|c_t - (c_{t-1} + z_t * (cc_t - c_{t-1}))|, which is zero for a correct cell."""
    rearranged = cache["a_prev"] + cache["z"] * (cache["cc"] - cache["a_prev"])
    return np.abs(cache["c"] - rearranged)


# ---------------------------------------------------------------------------
# dense head


def head_forward(model: GruModel, hidden, mask=None):
    """Affine head. Coefficient outputs are linear then masked; shifts are unmasked.

    ``mask`` is a boolean vector over the coefficient outputs (None = all active).
    """
    out = np.asarray(hidden) @ model.W_head.T + model.b_head
    coef = out[..., : model.n_coefficients]
    if mask is not None:
        coef = np.where(mask, coef, 0.0)
    return coef, out[..., model.n_coefficients:]


# ---------------------------------------------------------------------------
# differentiable fixed-step RK4


@dataclass
class SolveCache:
    theta: np.ndarray  # (B, n, P)
    phis: np.ndarray  # (S, 4, B, P)
    h: float
    substeps: int
    n_states: int


def solve_forward(library: PolynomialLibrary, theta, y0, inputs, h: float, substeps: int = 1):
    """Integrate y' = theta @ phi([y, u]) over a window for every batch member.

    theta: (B, n, P); y0: (B, n); inputs: (B, k, m), held constant over each
    sample interval. Returns the (B, k, n) trajectory and a cache for the
    backward pass. Non-finite values are allowed to propagate.
    """
    theta = np.asarray(theta, dtype=float)
    y = np.array(y0, dtype=float)
    b, n = y.shape
    k = inputs.shape[1]
    uses_inputs = library.n_vars > n
    hs = h / substeps
    steps = (k - 1) * substeps
    phis = np.empty((steps, 4, b, library.size))
    out = np.empty((b, k, n))
    out[:, 0] = y

    def field(point, s, stage):
        phi = evaluate(library, point)
        phis[s, stage] = phi
        return np.einsum("bnp,bp->bn", theta, phi)

    s = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(k - 1):
            u = inputs[:, i, :]
            for _ in range(substeps):
                join = (lambda x: np.concatenate([x, u], axis=1)) if uses_inputs else (lambda x: x)
                k1 = field(join(y), s, 0)
                k2 = field(join(y + 0.5 * hs * k1), s, 1)
                k3 = field(join(y + 0.5 * hs * k2), s, 2)
                k4 = field(join(y + hs * k3), s, 3)
                y = y + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                s += 1
            out[:, i + 1] = y
    return out, SolveCache(theta, phis, hs, substeps, n)


def solve_backward(library: PolynomialLibrary, cache: SolveCache, grad_states):
    """Reverse-mode sweep through the unrolled RK4 solve.

    grad_states: dL/dY, shape (B, k, n). Returns (dL/dtheta (B, n, P),
    dL/dinputs (B, k, m)). The gradient w.r.t. Y[:, 0] is dropped because the
    initial state is data.
    """
    theta, phis, hs, n = cache.theta, cache.phis, cache.h, cache.n_states
    b, k, _ = grad_states.shape
    steps = phis.shape[0]
    m = library.n_vars - n
    g_stage = np.empty((steps, 4, b, n))
    g_inputs = np.zeros((b, k, m))
    g = np.zeros((b, n))
    weights = (hs / 6.0, hs / 3.0, hs / 3.0, hs / 6.0)
    # stage j's evaluation point depends on stage j-1 through this factor
    feed = (None, 0.5 * hs, 0.5 * hs, hs)
    s = steps
    for i in range(k - 2, -1, -1):
        g = g + grad_states[:, i + 1]
        for _ in range(cache.substeps):
            s -= 1
            gk = [w * g for w in weights]
            gy = g.copy()
            for stage in (3, 2, 1, 0):
                g_stage[s, stage] = gk[stage]
                g_phi = np.einsum("bn,bnp->bp", gk[stage], theta)
                g_point = features_vjp(library, phis[s, stage], g_phi)
                gy += g_point[:, :n]
                if m:
                    g_inputs[:, i] += g_point[:, n:]
                if stage:
                    gk[stage - 1] = gk[stage - 1] + feed[stage] * g_point[:, :n]
            g = gy
    g_theta = np.einsum("sqbn,sqbp->bnp", g_stage, phis)
    return g_theta, g_inputs


def ode_loss(theta, shifts, window, substeps: int = 1) -> float:
    """MSE between a window and the RK4 solution of theta from its first state.

    ``theta`` is a CoefficientMatrix, ``shifts`` is added to the window's
    inputs, ``window`` is a Trajectory. Divergence gives DIVERGED_LOSS.
    """
    values = np.asarray(theta.values, dtype=float)[None]
    inputs = window.inputs[None]
    if len(shifts):
        inputs = inputs + np.asarray(shifts, dtype=float)
    pred, _ = solve_forward(theta.library, values, window.states[:1], inputs, window.h, substeps)
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.all(np.isfinite(pred)) or np.max(np.abs(pred)) > OVERFLOW_GUARD:
            return DIVERGED_LOSS
        return float(np.mean((pred[0] - window.states) ** 2))


# ---------------------------------------------------------------------------
# batched ODE loss through the whole network


@dataclass
class WindowBatch:
    states: np.ndarray  # (B, k, n) observed
    inputs: np.ndarray  # (B, k, m) observed
    encoded: np.ndarray  # (B, k, I) normalized GRU input


@dataclass
class Scaling:
    """Maps head outputs to physical coefficients and input shifts.

    theta[i, :] = head[i, :] @ coef_map[i] for every state i, and
    shift[c] = head_shift[c] * shift_scale[c]. A diagonal coef_map is plain
    rescaling; a triangular one expresses coefficients in a decorrelated basis.
    """

    coef_map: np.ndarray  # (n, P, P)
    shift_scale: np.ndarray  # (m,)

    @classmethod
    def identity(cls, n, p, m):
        return cls(np.broadcast_to(np.eye(p), (n, p, p)).copy(), np.ones(m))

    def to_physical(self, head_coef):
        """(..., n*P) head outputs -> (..., n, P) coefficients."""
        n, p, _ = self.coef_map.shape
        alpha = head_coef.reshape(head_coef.shape[:-1] + (n, p))
        return np.einsum("...ip,ipq->...iq", alpha, self.coef_map)

    def to_head(self, grad_theta):
        """Pull (..., n, P) coefficient gradients back to (..., n*P) head outputs."""
        g = np.einsum("...iq,ipq->...ip", grad_theta, self.coef_map)
        return g.reshape(g.shape[:-2] + (-1,))


@dataclass
class ForwardCache:
    gru: list
    hidden: np.ndarray
    solve: SolveCache
    grad_states: np.ndarray
    diverged: np.ndarray
    mask: np.ndarray = field(default=None)
    coef_spread: np.ndarray = field(default=None)
    consistency: float = 0.0


def network_forward(model: GruModel, batch: WindowBatch, library: PolynomialLibrary,
                    scaling: Scaling, h: float, mask=None, substeps: int = 1,
                    consistency: float = 0.0):
    """Forward pass for a batch; returns (objective, per-window ODE losses, cache).

    The objective is the mean ODE loss plus ``consistency`` times the mean
    squared deviation of each window's head coefficients from the batch mean.
    The penalty discourages the GRU from fitting each short window with its
    own, locally collinear, coefficient set.
    """
    n = batch.states.shape[2]
    hidden, gru_caches = gru_sequence_forward(model, batch.encoded)
    coef, shift = head_forward(model, hidden, mask)
    theta = scaling.to_physical(coef)
    u = batch.inputs + (shift * scaling.shift_scale)[:, None, :]
    pred, solve_cache = solve_forward(library, theta, batch.states[:, 0], u, h, substeps)
    with np.errstate(over="ignore", invalid="ignore"):
        bad = ~np.all(np.isfinite(pred), axis=(1, 2)) | (np.nanmax(np.abs(pred), axis=(1, 2)) > OVERFLOW_GUARD)
    if bad.any():
        # re-solve with a harmless field so the cache stays finite; those windows get no gradient
        theta = np.where(bad[:, None, None], 0.0, theta)
        pred, solve_cache = solve_forward(library, theta, batch.states[:, 0], u, h, substeps)
    resid = pred - batch.states
    k = batch.states.shape[1]
    window_loss = np.mean(resid ** 2, axis=(1, 2))
    window_loss[bad] = DIVERGED_LOSS
    b = batch.states.shape[0]
    grad_states = np.where(bad[:, None, None], 0.0, 2.0 * resid / (k * n * b))
    spread = coef - coef.mean(axis=0)
    penalty = consistency * float(np.sum(spread ** 2)) / b if consistency else 0.0
    cache = ForwardCache(gru_caches, hidden, solve_cache, grad_states, bad, mask, spread, consistency)
    return float(np.mean(window_loss)) + penalty, window_loss, cache


def network_backward(model: GruModel, library: PolynomialLibrary, scaling: Scaling, cache: ForwardCache) -> dict:
    """Exact gradients of the mean batch ODE loss for every parameter block."""
    g_theta, g_u = solve_backward(library, cache.solve, cache.grad_states)
    g_coef = scaling.to_head(g_theta)
    if cache.consistency:
        g_coef = g_coef + (2.0 * cache.consistency / len(g_coef)) * cache.coef_spread
    if cache.mask is not None:
        g_coef = np.where(cache.mask, g_coef, 0.0)
    g_shift = g_u.sum(axis=1) * scaling.shift_scale
    g_out = np.concatenate([g_coef, g_shift], axis=1)
    grads = gru_sequence_backward(model, cache.gru, g_out @ model.W_head)
    grads["W_head"] = g_out.T @ cache.hidden
    grads["b_head"] = g_out.sum(axis=0)
    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise GradientOverflow(name)
    return {name: grads[name] for name in PARAM_NAMES}


def backward(model: GruModel, library: PolynomialLibrary, scaling: Scaling, cache: ForwardCache) -> dict:
    return network_backward(model, library, scaling, cache)


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=10.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def reset(self, names):
        """Forget the moment estimates of some blocks (after a change of basis)."""
        for k in names:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0
            self.t[k] = 0

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        if self.clip_norm:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        for k, p in params.items():
            g = grads[k]
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / (1.0 - self.beta1 ** t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
