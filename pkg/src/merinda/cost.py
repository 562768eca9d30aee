"""Analytic memory and energy models for MERINDA-style recovery hardware.

Both models are evaluated in exact arithmetic: integers for memory, and
``fractions.Fraction`` for energy so fractional power constants such as 0.01
do not introduce rounding.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields, replace
from fractions import Fraction

from scipy import stats

from .constants import COMPLEXITY
from .errors import CostOverflow, UndefinedCorrelation

# results past this are treated as overflow, matching a checked 64-bit integer
INT_LIMIT = 2**63 - 1

CATALOG_LABELS = {
    "aid": "AID",
    "lotka": "Lotka",
    "lorenz": "Lorenz",
    "pathogenic": "Pathogenic",
    "f8": "F8",
}


def _exact(value, name):
    """Integers stay integers; anything else becomes an exact Fraction."""
    if isinstance(value, bool):
        raise TypeError(f"{name} must be numeric")
    if isinstance(value, int):
        return value
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite")
        # go through repr so 0.01 means 1/100, not its binary neighbour
        return Fraction(repr(value))
    raise TypeError(f"{name} must be numeric, got {type(value).__name__}")


def _checked(value):
    if abs(value) > INT_LIMIT:
        raise CostOverflow(f"cost {value} exceeds the 64-bit range")
    return value


@dataclass(frozen=True)
class MemoryModelParams:
    N: int
    M: int
    V: int = 16
    b_c: int = 32
    b_r: int = 32

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise TypeError(f"{f.name} must be an integer")
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be positive")
        if self.V < 0 or self.b_c < 0 or self.b_r < 0:
            raise ValueError("V, b_c and b_r must be non-negative")


@dataclass(frozen=True)
class EnergyModelParams:
    N: int
    M: int
    V: int = 16
    w_c: object = 1
    p_f_c: object = 10
    p_b_c: object = 10
    p_f_a: object = 1
    p_b_a: object = 1
    p_f_l: object = 1
    p_b_l: object = 1
    p_m: object = Fraction(1, 100)
    H: int = 5000
    T: int = 500
    stiffness: object = 1

    def __post_init__(self):
        for f in fields(self):
            v = _exact(getattr(self, f.name), f.name)
            if v < 0:
                raise ValueError(f"{f.name} must be non-negative")
            object.__setattr__(self, f.name, v)
        for name in ("N", "M", "V", "H", "T"):
            if not isinstance(getattr(self, name), int):
                raise TypeError(f"{name} must be an integer")
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")


def library_terms(n, m) -> int:
    return math.comb(m + n, m)


def memory_model(params: MemoryModelParams) -> int:
    """Bits needed for the CTLV weights plus the real-valued model state."""
    n, m = params.N, params.M
    c = _checked(library_terms(n, m))
    reals = n + c + n * c + max(n * n, m * m)
    return _checked(n * params.V * params.b_c + _checked(reals) * params.b_r)


def energy_model(params: EnergyModelParams):
    """Energy over T epochs. Returns an int when exact, otherwise a Fraction.

    ``stiffness`` scales the CTLV pass terms (the ODE solves); it defaults
    to 1, which leaves the base formula unchanged.
    """
    p = params
    c = _checked(library_terms(p.N, p.M))
    per_epoch = (
        p.stiffness * p.N * p.V * p.w_c * (p.p_f_c + p.p_b_c)
        + p.N * (p.p_f_a + p.p_b_a)
        + c * (p.p_f_l + p.p_b_l)
        + p.H * c * c * p.p_m
        + p.H * p.N * c * p.p_m
    )
    total = _checked(Fraction(p.T) * per_epoch)
    return int(total) if total.denominator == 1 else total


@dataclass(frozen=True)
class SweepPoint:
    N: int
    M: int
    predicted_memory: int
    predicted_energy: object
    system_label: str = ""

    def __post_init__(self):
        if self.predicted_memory <= 0 or self.predicted_energy <= 0:
            raise ValueError("memory and energy must be positive")


def koopman_sweep(schedule, mem_params: MemoryModelParams = None, energy_params: EnergyModelParams = None,
                  labels=None) -> list[SweepPoint]:
    """Evaluate both models at every (N, M) pair of ``schedule``.

    ``mem_params`` and ``energy_params`` supply everything except N and M;
    their own N and M are overwritten per point.
    """
    schedule = [tuple(pair) for pair in schedule]
    if not schedule:
        raise ValueError("schedule must contain at least one (N, M) pair")
    mem_params = mem_params or MemoryModelParams(1, 1)
    energy_params = energy_params or EnergyModelParams(1, 1)
    labels = list(labels) if labels is not None else [""] * len(schedule)
    points = []
    for (n, m), label in zip(schedule, labels):
        if n < 1 or m < 1:
            raise ValueError(f"schedule entries need N >= 1 and M >= 1, got ({n}, {m})")
        mem = memory_model(replace(mem_params, N=n, M=m))
        energy = energy_model(replace(energy_params, N=n, M=m))
        points.append(SweepPoint(n, m, mem, energy, label))
    return points


def catalog_schedule():
    """(labels, schedule) for the five benchmark systems, N = states, M = order."""
    labels, schedule = [], []
    for key, label in CATALOG_LABELS.items():
        nl, po, sv = COMPLEXITY[key]
        labels.append(f"{label} (NL={nl}, PO={po}, SV={sv})")
        schedule.append((sv, po))
    return labels, schedule


def pearson_correlation(xs, ys) -> tuple[float, float]:
    """Pearson r and its two-sided p-value (t distribution, len - 2 dof)."""
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) != len(ys):
        raise ValueError("xs and ys must have the same length")
    if len(xs) < 3:
        raise ValueError("need at least 3 points")
    mx, my = math.fsum(xs) / len(xs), math.fsum(ys) / len(ys)
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("correlation is undefined when either series is constant")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    dof = len(xs) - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(dof / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), dof))


# --- config file and CSV output -------------------------------------------

def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"line {lineno}: expected key = value")
        values[key] = value
    return values


def params_from_config(values: dict) -> tuple[MemoryModelParams, EnergyModelParams]:
    mem_keys = {f.name for f in fields(MemoryModelParams)} - {"N", "M"}
    energy_keys = {f.name for f in fields(EnergyModelParams)} - {"N", "M"}
    unknown = set(values) - mem_keys - energy_keys
    if unknown:
        raise ValueError(f"unknown cost parameters: {', '.join(sorted(unknown))}")
    int_keys = {"V", "b_c", "b_r", "H", "T"}
    mem, energy = {}, {}
    for key, value in values.items():
        number = int(value) if key in int_keys else Fraction(value)
        if isinstance(number, Fraction) and number.denominator == 1:
            number = int(number)
        if key in mem_keys:
            mem[key] = number
        if key in energy_keys:
            energy[key] = number
    return MemoryModelParams(1, 1, **mem), EnergyModelParams(1, 1, **energy)


def parse_schedule(text: str) -> list[tuple[int, int]]:
    """Read ``N,M`` pairs, one per line; a ``N,M`` header line is allowed."""
    pairs = []
    for row in csv.reader(io.StringIO(text)):
        cells = [c.strip() for c in row if c.strip()]
        if not cells or cells[0].startswith("#"):
            continue
        if cells[0].upper() == "N":
            continue
        if len(cells) != 2:
            raise ValueError(f"schedule rows need two integers, got {row}")
        pairs.append((int(cells[0]), int(cells[1])))
    return pairs


def format_number(value) -> str:
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return str(value.numerator)
        return repr(float(value))
    return str(value)


def sweep_csv(points: list[SweepPoint]) -> str:
    """Sweep rows plus Pearson footer rows (blank when r is undefined)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["label", "N", "M", "memory_bits", "energy_units"])
    for p in points:
        writer.writerow([p.system_label, p.N, p.M, p.predicted_memory, format_number(p.predicted_energy)])
    try:
        r, pval = pearson_correlation([p.predicted_memory for p in points],
                                      [p.predicted_energy for p in points])
        r_text, p_text = repr(r), repr(pval)
    except (UndefinedCorrelation, ValueError):
        r_text = p_text = ""
    writer.writerow(["pearson_r", "", "", r_text, ""])
    writer.writerow(["pearson_p", "", "", p_text, ""])
    return out.getvalue()
