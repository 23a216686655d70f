import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volhawkes.backtest import (
    CallableStrategy,
    ConstantSpread,
    FillModel,
    InventoryLinear,
    cross_impact_price,
    fill_intensity,
    impact_diffs,
    market_impact,
    run_backtest,
    summarize_impact,
)
from volhawkes.errors import DomainError, StrategyError, StructuralError
from volhawkes.kernels import KernelMatrix, sign_expand

LAM = np.array([40.0, 30.0, 20.0])
SIGMA0 = np.array([0.11, 0.1, 0.105])
# spectral radius 0.75 so literal (unthinned) runs stay stable
STABLE = sign_expand(KernelMatrix.exponential(np.full((3, 3), 5.0), 20.0))


def _run(strategy, fill=None, seed=0, feedback=False, kernel=None, **kw):
    kernel = STABLE if kernel is None else kernel
    fill = FillModel(LAM) if fill is None else fill
    return run_backtest(kernel, 1.0, fill, strategy, 1.0, seed, sigma0=SIGMA0, tick=1e-3, feedback=feedback, **kw)


def test_fill_probability_at_zero_spread():
    fm = FillModel(LAM)
    assert fm.probability(0.0, 0) == pytest.approx(0.6681877721681662, rel=1e-14)
    assert fill_intensity(0.0, 1, fm) == pytest.approx(30 * 0.6681877721681662)
    assert fm.probability(0.05, 0) < fm.probability(0.01, 0)


def test_fill_model_validation():
    with pytest.raises(DomainError):
        FillModel([1.0, 0.0])
    with pytest.raises(DomainError):
        FillModel([1.0], vega=[-1.0])


def test_never_fill_leaves_a_flat_book():
    r = _run(ConstantSpread(0.0, 3), fill=FillModel.never(3), scale_baseline=False)
    assert r.fills.counts().sum() == 0
    np.testing.assert_array_equal(r.pnl, 0.0)
    np.testing.assert_array_equal(r.inventory, 0.0)
    assert r.flow.counts().sum() > 0


def test_untraded_options_never_fill():
    r = _run(ConstantSpread(0.0, 3, traded=[1]))
    counts = r.trade_counts
    assert counts[0].sum() == 0 and counts[2].sum() == 0 and counts[1].sum() > 0


def test_inventory_is_net_fills():
    r = _run(InventoryLinear(0.002, 0.0005, 3), seed=4)
    n = r.fills.counts_at(r.grid)
    np.testing.assert_array_equal(r.inventory, n[:, 0::2] - n[:, 1::2])
    np.testing.assert_array_equal(r.trade_counts, r.fills.counts().reshape(-1, 2))


@pytest.mark.parametrize("feedback", [False, True])
def test_pnl_is_spread_income_plus_revaluation(feedback):
    # independent bookkeeping from the realised flow and fills
    c = 0.003
    r = _run(ConstantSpread(c, 3), seed=2, feedback=feedback)
    t_flow, c_flow = r.flow.merged()
    fill_times = set(zip(*r.fills.merged()))
    net = np.zeros(3)
    pnl_spread, entries = 0.0, []
    for t, comp in zip(t_flow, c_flow):
        opt, sign = comp // 2, 1 if comp % 2 == 0 else -1
        if (t, comp) in fill_times:
            pnl_spread += c
            entries.append((opt, sign, SIGMA0[opt] + 1e-3 * net[opt]))
        net[opt] += sign
    mark = SIGMA0 + 1e-3 * net
    reval = sum(sign * (mark[opt] - mid) for opt, sign, mid in entries)
    assert r.pnl[-1] == pytest.approx(pnl_spread + reval, abs=1e-12)
    np.testing.assert_allclose(r.mark[-1], mark)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 0.05), st.floats(0.0, 0.05), st.integers(0, 50))
def test_wider_spreads_fill_a_subset(c1, c2, seed):
    lo, hi = sorted((c1, c2))
    a = _run(ConstantSpread(lo, 3), seed=seed)
    b = _run(ConstantSpread(hi, 3), seed=seed)
    fa = {x for ev in a.fills.times for x in ev}
    fb = {x for ev in b.fills.times for x in ev}
    assert fb <= fa


def test_backtest_is_deterministic():
    a = _run(InventoryLinear(0.002, 0.0005, 3), seed=9, feedback=True)
    b = _run(InventoryLinear(0.002, 0.0005, 3), seed=9, feedback=True)
    np.testing.assert_array_equal(a.pnl, b.pnl)
    np.testing.assert_array_equal(a.inventory, b.inventory)


def test_feedback_removes_unfilled_requests():
    lit = _run(ConstantSpread(0.01, 3), seed=1)
    fb = _run(ConstantSpread(0.01, 3), seed=1, feedback=True)
    assert fb.flow.counts().sum() < lit.flow.counts().sum()
    # in feedback mode every traded request that survives was filled
    np.testing.assert_array_equal(fb.flow.counts(), fb.fills.counts())


def test_one_fill_moves_price_five_bp():
    r = _run(ConstantSpread(0.0, 3), seed=3)
    C0 = np.array([2.0, 3.0, 4.0])
    bp = cross_impact_price(r, 5e-4 * C0, C0)
    np.testing.assert_allclose(bp, 5.0 * r.inventory)


def test_cross_impact_from_flow_difference():
    a = _run(ConstantSpread(0.0, 3), seed=3, feedback=True)
    b = _run(ConstantSpread(0.0, 3), seed=3)
    bp = cross_impact_price(a, 5e-4, 1.0, reference=b)
    np.testing.assert_allclose(bp, 5.0 * (a.flow_net - b.flow_net))
    with pytest.raises(DomainError):
        cross_impact_price(a, 0.0, 1.0)


def test_strategy_error_keeps_partial_result():
    def bad(t, q):
        d = np.full(3, np.nan if t > 0.5 else 0.001)
        return d, d

    with pytest.raises(StrategyError) as info:
        _run(CallableStrategy(bad, 3))
    partial = info.value.partial
    assert not partial.complete
    assert partial.fills.counts().sum() > 0


def test_dimension_mismatch():
    with pytest.raises(StructuralError):
        run_backtest(KernelMatrix.zeros(4), 1.0, FillModel(LAM), ConstantSpread(0.0, 3), 1.0, 0)


def test_always_fill_has_no_impact():
    diffs = impact_diffs(STABLE, 1.0, FillModel.always(3), ConstantSpread(0.0, 3), 1.0, range(5))
    np.testing.assert_array_equal(diffs, 0.0)


def test_poisson_flow_has_no_cross_impact():
    fill = FillModel(LAM)
    diffs = impact_diffs(KernelMatrix.zeros(6), 1.0, fill, ConstantSpread(0.01, 3, traded=[0]), 1.0, range(20))
    np.testing.assert_array_equal(diffs[:, :, 1:], 0.0)
    assert np.any(diffs[:, :, 0] != 0)


def test_market_impact_needs_enough_seeds():
    with pytest.raises(DomainError):
        market_impact(KernelMatrix.zeros(6), 1.0, FillModel(LAM), ConstantSpread(0.0, 3), 1.0, range(10))


def test_impact_summary():
    diffs = np.array([[[0.0, 0.0], [1.0, -2.0]], [[0.0, 0.0], [-1.0, 2.0]]])
    rep = summarize_impact(diffs, xi=5e-4, C0=1.0, T_scale=2.0)
    np.testing.assert_allclose(rep.mi_point[-1], [0.0, 0.0])
    np.testing.assert_allclose(rep.mi_point_abs[-1], [1.0, 2.0])
    np.testing.assert_allclose(rep.mi_total, [0.0, 3.0])
    np.testing.assert_allclose(rep.cross_bp[-1], [10.0, 20.0])
