import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from merinda.cost import (
    EnergyModelParams,
    MemoryModelParams,
    SweepPoint,
    catalog_schedule,
    energy_model,
    koopman_sweep,
    memory_model,
    params_from_config,
    parse_config,
    parse_schedule,
    pearson_correlation,
    sweep_csv,
)
from merinda.errors import CostOverflow, UndefinedCorrelation

UNIT = dict(V=1, w_c=1, p_f_c=1, p_b_c=1, p_f_a=1, p_b_a=1, p_f_l=1, p_b_l=1, p_m=1, H=2, T=1)
SCHEDULE = [(2, 3), (3, 2), (5, 1)]


def memory_oracle(n, m, v, b_c, b_r):
    # straight transcription with factorials instead of math.comb
    c = math.factorial(m + n) // (math.factorial(m) * math.factorial(n))
    return n * v * b_c + (n + c + n * c + max(n * n, m * m)) * b_r


def test_memory_example():
    assert memory_model(MemoryModelParams(2, 2, 16, 32, 32)) == 1792
    assert memory_model(MemoryModelParams(2, 2, 0, 32, 32)) == 24 * 32


def test_memory_bit_width_linearity():
    base = MemoryModelParams(3, 2, 16, 32, 32)
    doubled = MemoryModelParams(3, 2, 16, 32, 64)
    first = 3 * 16 * 32
    assert memory_model(doubled) - first == 2 * (memory_model(base) - first)


def test_energy_unit_example():
    value = energy_model(EnergyModelParams(1, 1, **UNIT))
    assert value == 20 and isinstance(value, int)


def test_energy_linear_in_epochs_and_pm_terms():
    one = energy_model(EnergyModelParams(2, 3, T=1))
    assert energy_model(EnergyModelParams(2, 3, T=2)) == 2 * one
    with pytest.raises(ValueError):
        EnergyModelParams(2, 3, T=0)
    no_mult = energy_model(EnergyModelParams(2, 3, T=1, p_m=0))
    c = math.comb(5, 3)
    assert one - no_mult == 5000 * (c * c + 2 * c) * Fraction(1, 100)


def test_energy_is_exact_with_fractional_constants():
    value = energy_model(EnergyModelParams(1, 1, **{**UNIT, "p_m": Fraction(1, 7)}))
    # 2 + 2 + 4 from the pass terms, then H C^2 p_m = 8/7 and H N C p_m = 4/7
    assert value == 8 + Fraction(12, 7)
    assert EnergyModelParams(1, 1, p_m=0.01).p_m == Fraction(1, 100)


def test_stiffness_scales_ctlv_term_only():
    base = energy_model(EnergyModelParams(2, 2, T=1))
    stiff = energy_model(EnergyModelParams(2, 2, T=1, stiffness=3))
    assert stiff - base == 2 * (2 * 16 * 1 * 20)


def test_sweep_schedule_values():
    points = koopman_sweep(SCHEDULE, energy_params=EnergyModelParams(1, 1, T=1))
    assert [p.predicted_memory for p in points] == [2336, 3200, 4672]
    assert [p.predicted_energy for p in points] == [6664, 7486, 4922]
    r, _ = pearson_correlation([p.predicted_memory for p in points], [p.predicted_energy for p in points])
    assert r < 0


def test_single_point_sweep_matches_direct_calls():
    (point,) = koopman_sweep([(3, 2)])
    assert point.predicted_memory == memory_model(MemoryModelParams(3, 2))
    assert point.predicted_energy == energy_model(EnergyModelParams(3, 2))


def test_sweep_rejects_bad_schedules():
    with pytest.raises(ValueError):
        koopman_sweep([])
    with pytest.raises(ValueError):
        koopman_sweep([(0, 2)])
    with pytest.raises(ValueError):
        SweepPoint(1, 1, 0, 5)


def test_overflow_is_reported():
    with pytest.raises(CostOverflow):
        memory_model(MemoryModelParams(60, 60))
    with pytest.raises(OverflowError):
        energy_model(EnergyModelParams(40, 40))


def test_pearson_examples():
    assert pearson_correlation([1, 2, 3], [2, 4, 6])[0] == pytest.approx(1.0)
    assert pearson_correlation([1, 2, 3], [3, 2, 1])[0] == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelation):
        pearson_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_correlation([1, 2], [1, 2])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=20))
def test_pearson_matches_scipy(pairs):
    xs, ys = zip(*pairs)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return
    try:
        r, p = pearson_correlation(xs, ys)
    except UndefinedCorrelation:
        return
    ref = stats.pearsonr(xs, ys)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(ref.statistic, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 12), m=st.integers(1, 8), v=st.integers(0, 64), b_c=st.integers(0, 64), b_r=st.integers(0, 64))
def test_memory_matches_oracle(n, m, v, b_c, b_r):
    assert memory_model(MemoryModelParams(n, m, v, b_c, b_r)) == memory_oracle(n, m, v, b_c, b_r)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), m=st.integers(1, 5), t=st.integers(1, 50))
def test_energy_grows_with_order_and_epochs(n, m, t):
    lower = energy_model(EnergyModelParams(n, m, T=t))
    higher = energy_model(EnergyModelParams(n, m + 1, T=t))
    assert higher > lower
    assert energy_model(EnergyModelParams(n, m, T=t + 1)) > lower


@pytest.mark.parametrize("order", [1, 2, 3])
def test_memory_leading_terms_dominate(order):
    # for fixed M the b_r block, N*C(M+N, M) + max(N^2, M^2), carries the growth
    def ratio(n):
        c = math.comb(order + n, order)
        return memory_model(MemoryModelParams(n, order)) / (32 * (n * c + max(n * n, order * order)))

    values = [ratio(n) for n in (50, 100, 200)]
    assert values[0] > values[1] > values[2] > 1.0
    assert values[2] - 1.0 < 0.05


def test_memory_is_quadratic_only_at_first_order():
    def spread(order):
        r50, r100 = (memory_model(MemoryModelParams(n, order)) / n ** 2 for n in (50, 100))
        return abs(r50 - r100) / r100

    # at M=1 the library has N+1 terms, so N*C is itself quadratic
    assert spread(1) < 0.1
    # at M=2 the N*C(N+2, 2) term is cubic and memory / N^2 keeps growing
    assert spread(2) > 0.4


def test_config_parsing():
    values = parse_config("# cost constants\nH = 200\np_m = 0.02  # per multiply\n\nb_r=16\n")
    assert values == {"H": "200", "p_m": "0.02", "b_r": "16"}
    mem, energy = params_from_config(values)
    assert mem.b_r == 16 and energy.H == 200 and energy.p_m == Fraction(1, 50)
    with pytest.raises(ValueError):
        parse_config("just words\n")
    with pytest.raises(ValueError):
        params_from_config({"watts": "3"})


def test_schedule_parsing():
    assert parse_schedule("N,M\n2,3\n\n5,1\n") == [(2, 3), (5, 1)]
    with pytest.raises(ValueError):
        parse_schedule("1,2,3\n")


def test_catalog_rows():
    labels, schedule = catalog_schedule()
    assert [label.split()[0] for label in labels] == ["AID", "Lotka", "Lorenz", "Pathogenic", "F8"]
    assert "NL=2, PO=2, SV=3" in labels[2]
    assert schedule == [(3, 2), (2, 2), (3, 2), (5, 3), (3, 3)]


def test_sweep_csv_layout():
    text = sweep_csv(koopman_sweep(SCHEDULE, labels=["a", "b", "c"]))
    lines = text.splitlines()
    assert lines[0] == "label,N,M,memory_bits,energy_units"
    assert lines[1].startswith("a,2,3,2336,")
    assert lines[-2].startswith("pearson_r,,,-0.")
    assert lines[-1].startswith("pearson_p,,,")
