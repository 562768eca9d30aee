"""Benchmark systems, fixed-step RK4 integration and trajectory data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import constants as C
from .errors import IntegrationDiverged, TrajectoryTooShort, UnknownSystem
from .library import CoefficientMatrix, PolynomialLibrary, build_library, rhs_from_coefficients

OVERFLOW_GUARD = 1e12


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        inputs = self.inputs
        if inputs is None:
            inputs = np.zeros((len(times), 0))
        inputs = np.array(inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if len(times) < 2:
            raise TrajectoryTooShort("a trajectory needs at least 2 samples")
        if states.shape[0] != len(times) or inputs.shape[0] != len(times):
            raise ValueError("states and inputs must have one row per time stamp")
        steps = np.diff(times)
        h = steps[0]
        if h <= 0 or not np.all(np.abs(steps - h) <= 1e-12 * max(abs(h), np.abs(times).max())):
            raise ValueError("times must be strictly increasing with a uniform step")
        for arr in (times, states, inputs):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_samples(self) -> int:
        return len(self.times)

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    def window(self, start: int, length: int) -> "Trajectory":
        stop = start + length
        return Trajectory(self.times[start:stop], self.states[start:stop], self.inputs[start:stop])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["t"] + [f"x{i}" for i in range(self.n_states)] + [f"u{i}" for i in range(self.n_inputs)]
        writer.writerow(header)
        table = np.column_stack([self.times, self.states, self.inputs])
        for row in table:
            writer.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        header = rows[0]
        if not header or header[0] != "t":
            raise ValueError("trajectory CSV must start with a 't' column")
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        ucols = [i for i, h in enumerate(header) if h.startswith("u")]
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
        return cls(data[:, 0], data[:, xcols], data[:, ucols])


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n_states: int
    n_inputs: int
    library_order: int
    true_coefficients: CoefficientMatrix
    nonlinear_term_count: int
    rhs: Callable = field(repr=False, compare=False)
    default_x0: tuple = ()
    default_dt: float = 0.01
    default_steps: int = 1000
    input_signal: Callable = field(default=None, repr=False, compare=False)

    @property
    def library(self) -> PolynomialLibrary:
        return self.true_coefficients.library

    def inputs_for(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if self.input_signal is None or self.n_inputs == 0:
            return np.zeros((len(times), 0))
        return np.asarray(self.input_signal(times), dtype=float).reshape(len(times), self.n_inputs)


def rk4_step(deriv, x, u, t: float, h: float, step: int = 0) -> np.ndarray:
    """One classical Runge-Kutta step; raises IntegrationDiverged on non-finite output."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = np.asarray(deriv(x, u, t), dtype=float)
        k2 = np.asarray(deriv(x + 0.5 * h * k1, u, t + 0.5 * h), dtype=float)
        k3 = np.asarray(deriv(x + 0.5 * h * k2, u, t + 0.5 * h), dtype=float)
        k4 = np.asarray(deriv(x + h * k3, u, t + h), dtype=float)
        out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(step)
    return out


def integrate(system, x0, inputs=None, h: float = None, n_samples: int = None, t0: float = 0.0) -> Trajectory:
    """Integrate a field (or a catalog SystemSpec) with fixed-step RK4.

    Inputs are held constant over each step (zero-order hold). Row 0 of the
    result is ``x0``. Raises IntegrationDiverged once any state exceeds the
    1e12 overflow guard.
    """
    if isinstance(system, SystemSpec):
        field_fn = system.rhs
        h = system.default_dt if h is None else h
    else:
        field_fn = system
    if h is None or n_samples is None:
        raise ValueError("h and n_samples are required")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    x = np.array(x0, dtype=float).reshape(-1)
    if inputs is None:
        inputs = np.zeros((n_samples, 0))
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.shape[0] != n_samples:
        raise ValueError("inputs must have one row per sample")
    times = t0 + h * np.arange(n_samples)
    states = np.empty((n_samples, x.size))
    states[0] = x
    for i in range(n_samples - 1):
        x = rk4_step(field_fn, x, inputs[i], times[i], h, step=i)
        if np.max(np.abs(x)) > OVERFLOW_GUARD:
            raise IntegrationDiverged(i)
        states[i + 1] = x
    return Trajectory(times, states, inputs)


def simulate(spec: SystemSpec, steps: int = None, dt: float = None, x0=None) -> Trajectory:
    """Generate a clean trajectory of ``steps`` samples with the system's default forcing."""
    steps = spec.default_steps if steps is None else steps
    dt = spec.default_dt if dt is None else dt
    x0 = spec.default_x0 if x0 is None else x0
    times = dt * np.arange(steps)
    return integrate(spec.rhs, x0, spec.inputs_for(times), dt, steps)


def add_noise(traj: Trajectory, noise: NoiseSpec) -> Trajectory:
    """Add i.i.d. Gaussian noise to the states; times and inputs are untouched."""
    if noise.kind == "none" or noise.sigma == 0:
        return traj
    rng = np.random.default_rng(noise.seed)
    noisy = traj.states + rng.normal(0.0, noise.sigma, size=traj.states.shape)
    return Trajectory(traj.times, noisy, traj.inputs)


def hudson_bay_dataset() -> Trajectory:
    """Annual hare (x0) and lynx (x1) pelt counts in thousands, 1900-1920."""
    return Trajectory(
        np.array(C.HUDSON_BAY_YEARS, dtype=float),
        np.column_stack([C.HUDSON_BAY_HARE, C.HUDSON_BAY_LYNX]),
    )


# ---------------------------------------------------------------------------
# analytic right-hand sides, written independently of the feature library


def lotka_rhs(x, u=None, t=0.0):
    a, b, c, d = C.LOTKA_A, C.LOTKA_B, C.LOTKA_C, C.LOTKA_D
    return np.array([a * x[0] - b * x[0] * x[1], -c * x[1] + d * x[0] * x[1]])


def lorenz_rhs(x, u=None, t=0.0):
    s, r, b = C.LORENZ_SIGMA, C.LORENZ_RHO, C.LORENZ_BETA
    return np.array([s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2]])


def _aid_rates():
    tau = C.AID_SAMPLE_MINUTES
    return C.BERGMAN_P1 * tau, C.BERGMAN_P2 * tau, C.BERGMAN_P3 * tau * tau, C.BERGMAN_N * tau


def aid_rhs(x, u, t=0.0):
    # x = (glucose, remote insulin action, plasma insulin); u = (insulin infusion, meal glucose)
    p1, p2, p3, n = _aid_rates()
    g, ia, ins = x
    return np.array([
        -p1 * (g - C.BERGMAN_GB) - ia * g + u[1],
        -p2 * ia + p3 * (ins - C.BERGMAN_IB),
        -n * (ins - C.BERGMAN_IB) + u[0],
    ])


def pathogenic_rhs(x, u, t=0.0):
    p, pc, ab, dmg, drug = x
    return np.array([
        C.PATHOGEN_GROWTH * p - C.PATHOGEN_KILL * p * ab - C.PATHOGEN_DRUG_KILL * p * drug,
        C.PLASMA_STIMULATION * p * ab * (1.0 - dmg) - C.PLASMA_DECAY * (pc - C.PLASMA_BASELINE),
        C.ANTIBODY_PRODUCTION * pc - C.ANTIBODY_DECAY * ab - C.ANTIBODY_BINDING * p * ab,
        C.DAMAGE_RATE * p - C.DAMAGE_RECOVERY * dmg,
        -C.DRUG_CLEARANCE * drug + u[0],
    ])


def f8_rhs(x, u, t=0.0):
    a, th, q = x
    v = u[0]
    A, Q = C.F8_ALPHA, C.F8_Q
    return np.array([
        A["alpha"] * a + A["q"] * q + A["alpha*q"] * a * q + A["alpha^2"] * a * a
        + A["theta^2"] * th * th + A["alpha^2*q"] * a * a * q + A["alpha^3"] * a ** 3
        + A["u"] * v + A["alpha^2*u"] * a * a * v + A["alpha*u^2"] * a * v * v + A["u^3"] * v ** 3,
        q,
        Q["alpha"] * a + Q["q"] * q + Q["alpha^2"] * a * a + Q["alpha^3"] * a ** 3
        + Q["u"] * v + Q["alpha^2*u"] * a * a * v + Q["alpha*u^2"] * a * v * v + Q["u^3"] * v ** 3,
    ])


# ---------------------------------------------------------------------------
# default forcing signals


def _aid_inputs(times):
    times = np.asarray(times)
    u = np.zeros((len(times), 2))
    for start in (30.0, 110.0):  # meals, in samples
        meal = (times >= start) & (times < start + 6)
        u[meal, 1] = 8.0
        bolus = (times >= start) & (times < start + 3)
        u[bolus, 0] = 20.0
    return u


def _pathogen_inputs(times):
    times = np.asarray(times)
    return np.where((times >= 2.0) & (times < 4.0), 1.0, 0.0)[:, None]


def _f8_inputs(times):
    times = np.asarray(times)
    return (0.05 * np.sin(1.3 * times) + 0.03 * np.sin(0.41 * times + 0.5))[:, None]


# ---------------------------------------------------------------------------
# catalog


def _coefficients(names, state_names, n_states, order, rows) -> CoefficientMatrix:
    lib = build_library(len(names), order, names)
    index = {name: j for j, name in enumerate(lib.term_names())}
    values = np.zeros((n_states, lib.size))
    for i, row in enumerate(rows):
        for term, value in row.items():
            values[i, index[term]] = value
    return CoefficientMatrix(lib, values, tuple(state_names))


def _lotka() -> SystemSpec:
    a, b, c, d = C.LOTKA_A, C.LOTKA_B, C.LOTKA_C, C.LOTKA_D
    coeffs = _coefficients(["x", "y"], ["x", "y"], 2, 2, [
        {"x": a, "x*y": -b},
        {"y": -c, "x*y": d},
    ])
    return SystemSpec("lotka", 2, 0, 2, coeffs, C.COMPLEXITY["lotka"][0], lotka_rhs,
                      (10.0, 5.0), C.DEFAULT_DT["lotka"], 401)


def _lorenz() -> SystemSpec:
    s, r, b = C.LORENZ_SIGMA, C.LORENZ_RHO, C.LORENZ_BETA
    coeffs = _coefficients(["x", "y", "z"], ["x", "y", "z"], 3, 2, [
        {"x": -s, "y": s},
        {"x": r, "y": -1.0, "x*z": -1.0},
        {"x*y": 1.0, "z": -b},
    ])
    return SystemSpec("lorenz", 3, 0, 2, coeffs, C.COMPLEXITY["lorenz"][0], lorenz_rhs,
                      (-8.0, 7.0, 27.0), C.DEFAULT_DT["lorenz"], 1001)


def _aid() -> SystemSpec:
    p1, p2, p3, n = _aid_rates()
    gb, ib = C.BERGMAN_GB, C.BERGMAN_IB
    coeffs = _coefficients(["G", "X", "I", "u_ins", "u_meal"], ["G", "X", "I"], 3, 2, [
        {"1": p1 * gb, "G": -p1, "G*X": -1.0, "u_meal": 1.0},
        {"1": -p3 * ib, "X": -p2, "I": p3},
        {"1": n * ib, "I": -n, "u_ins": 1.0},
    ])
    return SystemSpec("aid", 3, 2, 2, coeffs, C.COMPLEXITY["aid"][0], aid_rhs,
                      (180.0, 0.0, 15.0), C.DEFAULT_DT["aid"], 200, _aid_inputs)


def _pathogenic() -> SystemSpec:
    coeffs = _coefficients(["P", "C", "A", "D", "R", "u"], ["P", "C", "A", "D", "R"], 5, 3, [
        {"P": C.PATHOGEN_GROWTH, "P*A": -C.PATHOGEN_KILL, "P*R": -C.PATHOGEN_DRUG_KILL},
        {"P*A": C.PLASMA_STIMULATION, "P*A*D": -C.PLASMA_STIMULATION,
         "C": -C.PLASMA_DECAY, "1": C.PLASMA_DECAY * C.PLASMA_BASELINE},
        {"C": C.ANTIBODY_PRODUCTION, "A": -C.ANTIBODY_DECAY, "P*A": -C.ANTIBODY_BINDING},
        {"P": C.DAMAGE_RATE, "D": -C.DAMAGE_RECOVERY},
        {"R": -C.DRUG_CLEARANCE, "u": 1.0},
    ])
    return SystemSpec("pathogenic", 5, 1, 3, coeffs, C.COMPLEXITY["pathogenic"][0], pathogenic_rhs,
                      (1.0, 2.0, 0.5, 0.0, 0.0), C.DEFAULT_DT["pathogenic"], 401, _pathogen_inputs)


def _f8() -> SystemSpec:
    rename = {"alpha": "a", "q": "q", "theta": "th", "u": "u"}

    def translate(row):
        out = {}
        for term, value in row.items():
            parts = []
            for factor in term.split("*"):
                base, _, power = factor.partition("^")
                parts.append(rename[base] + (f"^{power}" if power else ""))
            out[_canonical(parts)] = value
        return out

    coeffs = _coefficients(["a", "th", "q", "u"], ["a", "th", "q"], 3, 3, [
        translate(C.F8_ALPHA),
        {"q": 1.0},
        translate(C.F8_Q),
    ])
    return SystemSpec("f8", 3, 1, 3, coeffs, C.COMPLEXITY["f8"][0], f8_rhs,
                      (0.1, 0.0, 0.0), C.DEFAULT_DT["f8"], 2001, _f8_inputs)


def _canonical(parts):
    order = ["a", "th", "q", "u"]
    return "*".join(sorted(parts, key=lambda p: order.index(p.partition("^")[0])))


_CATALOG = {
    "aid": _aid,
    "lotka": _lotka,
    "lorenz": _lorenz,
    "pathogenic": _pathogenic,
    "f8": _f8,
}

SYSTEM_NAMES = tuple(_CATALOG)


def catalog_system(name: str) -> SystemSpec:
    key = name.lower()
    if key not in _CATALOG:
        raise UnknownSystem(name, SYSTEM_NAMES)
    return _CATALOG[key]()


def library_rhs(spec: SystemSpec):
    """Vector field built from the system's coefficient matrix instead of the analytic form."""
    return rhs_from_coefficients(spec.true_coefficients)
