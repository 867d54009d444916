import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morphcl.schemas import Polarity, SineTaskSpec
from morphcl.services.metrics import (
    PerfMatrix,
    avg_perf,
    bwt,
    divergence_gap_correlation,
    forgetting,
    fwt,
    task_divergence,
)
from morphcl.services.tasks import Dataset, gen_sine_task


def test_worked_error_example():
    pm = PerfMatrix.from_rows([[0.1], [0.3, 0.05]])
    assert avg_perf(pm) == pytest.approx(0.175)
    assert bwt(pm) == pytest.approx(-0.2)
    assert forgetting(pm) == pytest.approx(0.2)
    assert fwt(pm) == 0.0


def test_worked_accuracy_example():
    pm = PerfMatrix.from_rows([[0.9], [0.6, 0.95]], Polarity.ACCURACY)
    assert forgetting(pm) == pytest.approx(0.3)


def test_single_task_has_no_transfer_metrics():
    pm = PerfMatrix.from_rows([[0.2]])
    assert avg_perf(pm) == pytest.approx(0.2)
    assert bwt(pm) is None and forgetting(pm) is None and fwt(pm) is None


def test_upper_triangle_is_rejected():
    pm = PerfMatrix(3)
    with pytest.raises(IndexError):
        pm.record(0, 1, 0.5)
    with pytest.raises(ValueError):
        pm.record(1, 0, float("nan"))


def test_incomplete_final_row():
    pm = PerfMatrix(2)
    pm.record(0, 0, 0.1)
    with pytest.raises(ValueError):
        avg_perf(pm)


@st.composite
def perf_matrices(draw):
    T = draw(st.integers(min_value=2, max_value=6))
    rows = [draw(st.lists(st.floats(0.0, 1.0), min_size=j + 1, max_size=j + 1)) for j in range(T)]
    return rows


@given(perf_matrices())
def test_forgetting_bounds_negative_bwt(rows):
    pm = PerfMatrix.from_rows(rows)
    assert forgetting(pm) >= 0.0
    assert forgetting(pm) >= -bwt(pm) - 1e-12


@given(perf_matrices())
def test_rows_survive_serialization(rows):
    pm = PerfMatrix.from_rows(rows)
    assert PerfMatrix.from_rows(pm.to_rows()).to_rows() == pm.to_rows()


def _ds(x, y):
    return Dataset(np.asarray(x, dtype=float).reshape(-1, 1), np.asarray(y, dtype=float).reshape(-1, 1), 0)


def test_divergence_extremes():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 200)
    a = _ds(x, np.sin(x))
    assert task_divergence(a, a) == 0.0
    b = _ds(x + 2.0, np.sin(x))
    assert task_divergence(a, b) == pytest.approx(1.0)


@given(st.integers(0, 2**16), st.integers(1, 32))
def test_divergence_is_symmetric_and_bounded(seed, n_bins):
    rng = np.random.default_rng(seed)
    a = _ds(rng.normal(size=50), rng.normal(size=50))
    b = _ds(rng.normal(0.5, size=60), rng.normal(size=60))
    d = task_divergence(a, b, n_bins)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(task_divergence(b, a, n_bins))


def test_divergence_rejects_empty():
    with pytest.raises(ValueError):
        task_divergence(_ds([], []), _ds([1.0], [1.0]))


def test_correlation_reports_one_point_per_pair():
    result = divergence_gap_correlation(n_pairs=6, seed=1, n_samples=300)
    assert len(result.divergences) == len(result.gaps) == 6
    assert -1.0 <= result.spearman <= 1.0
    with pytest.raises(ValueError):
        divergence_gap_correlation(n_pairs=2)


def test_divergence_and_loss_gap_rank_together():
    result = divergence_gap_correlation(n_pairs=20, seed=0)
    assert result.spearman >= 0.5


def test_near_phase_shift_diverges_less_than_half_period():
    base = SineTaskSpec(n_samples=20000)
    a = gen_sine_task(base, 0)
    near = gen_sine_task(base.model_copy(update={"phase": 0.01}), 1)
    far = gen_sine_task(base.model_copy(update={"phase": np.pi}), 2)
    bins = (230, 8)
    assert task_divergence(a, near, bins) < task_divergence(a, far, bins)


def test_divergence_bin_counts_follow_columns():
    a = _ds([0.0, 1.0], [0.0, 1.0])
    with pytest.raises(ValueError, match="bin counts"):
        task_divergence(a, a, (4, 4, 4))
    with pytest.raises(ValueError):
        task_divergence(a, a, 0)
