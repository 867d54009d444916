import pytest

from morphcl.services import acceptance
from morphcl.services.acceptance import (
    SuiteContext,
    check_gradients,
    check_identity_morph,
    check_metrics_oracle,
    check_search_oracle,
    check_transfer_algebra,
    run_check,
    run_suite,
)


@pytest.fixture
def ctx(tmp_path):
    return SuiteContext(out_dir=tmp_path)


@pytest.mark.parametrize(
    "check",
    [check_gradients, check_transfer_algebra, check_identity_morph, check_search_oracle, check_metrics_oracle],
)
def test_property_checks_pass(ctx, check):
    passed, detail = check(ctx)
    assert passed, detail


def test_crashing_check_is_a_failure(ctx, monkeypatch):
    def crash(_ctx):
        raise RuntimeError("kaput")

    monkeypatch.setitem(acceptance.CHECKS, 2, ("crashes", crash))
    result = run_check(2, ctx)
    assert not result.passed
    assert "kaput" in result.detail
    assert result.name == "2. crashes"


def test_suite_runs_checks_in_order(tmp_path, monkeypatch):
    monkeypatch.setitem(acceptance.SUITES, "properties", (3, 2))
    results = run_suite("properties", out_dir=tmp_path)
    assert [r.name for r in results] == ["3. identity morph", "2. transfer algebra"]
    assert all(r.passed for r in results)


def test_unknown_suite(tmp_path):
    with pytest.raises(ValueError):
        run_suite("nightly", out_dir=tmp_path)
