"""Market-making backtest on quote-modulated Hawkes order flow and market-impact curves."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, StrategyError, StructuralError
from .hawkes import EventLog, _baseline, simulate_cluster
from .kernels import KernelMatrix
from .scaling import _check_alpha, rescaled_net, seed_sequence


@dataclass(frozen=True)
class FillModel:
    """Logistic fill rate ``lambda / (1 + exp(alpha + beta delta / vega))``.

    Spreads are in implied-vol units (0.01 is one vol point). ``lambda_scale``
    is the stand-alone request rate per option; the simulation uses the ratio
    ``Lambda(delta)/lambda_scale`` as the probability that a request fills.
    """

    lambda_scale: np.ndarray
    alpha_fill: float = -0.7
    beta_fill: float = 10.0
    vega: np.ndarray | None = None

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambda_scale, dtype=float))
        if np.any(~(lam > 0)):
            raise DomainError("lambda_scale must be positive")
        vega = np.ones_like(lam) if self.vega is None else np.broadcast_to(np.asarray(self.vega, dtype=float), lam.shape).copy()
        if np.any(~(vega > 0)):
            raise DomainError("vega must be positive")
        if np.isnan(self.alpha_fill) or not np.isfinite(self.beta_fill):
            raise DomainError("alpha_fill must not be NaN and beta_fill must be finite")
        lam.setflags(write=False)
        vega.setflags(write=False)
        object.__setattr__(self, "lambda_scale", lam)
        object.__setattr__(self, "vega", vega)

    @property
    def n_options(self) -> int:
        return self.lambda_scale.size

    def probability(self, delta, option) -> np.ndarray:
        x = self.alpha_fill + self.beta_fill * np.asarray(delta, dtype=float) / self.vega[option]
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(x))

    def request_baseline(self, mu) -> np.ndarray:
        """Per-component request baseline ``mu * lambda_scale`` (signs interleaved)."""
        mu = _baseline(mu, 2 * self.n_options)
        return mu * np.repeat(self.lambda_scale, 2)

    @classmethod
    def never(cls, n_options: int) -> "FillModel":
        return cls(np.ones(n_options), alpha_fill=np.inf, beta_fill=0.0)

    @classmethod
    def always(cls, n_options: int) -> "FillModel":
        return cls(np.ones(n_options), alpha_fill=-np.inf, beta_fill=0.0)


def fill_intensity(delta, option: int, model: FillModel) -> float:
    return float(model.lambda_scale[option] * model.probability(delta, option))


# ---------------------------------------------------------------------------
# strategies


class QuoteStrategy:
    """Maps ``(t, q)`` to per-option spreads ``(delta_plus, delta_minus)``.

    ``traded`` flags the options the market maker quotes; requests on the
    other options never fill.
    """

    traded: np.ndarray

    def spreads(self, t: float, q: np.ndarray):
        raise NotImplementedError

    def __call__(self, t, q):
        return self.spreads(t, q)


def _traded_mask(traded, n: int) -> np.ndarray:
    if traded is None:
        return np.ones(n, bool)
    traded = np.asarray(traded)
    if traded.dtype == bool:
        if traded.size != n:
            raise StructuralError("traded mask length does not match the number of options")
        return traded.copy()
    mask = np.zeros(n, bool)
    mask[traded.astype(int)] = True
    return mask


@dataclass
class ConstantSpread(QuoteStrategy):
    c: float
    n_options: int
    traded: np.ndarray | Sequence[int] | None = None

    def __post_init__(self):
        self.traded = _traded_mask(self.traded, self.n_options)

    def spreads(self, t, q):
        d = np.full(self.n_options, float(self.c))
        return d, d


@dataclass
class InventoryLinear(QuoteStrategy):
    """``delta+ = c0 + c1 q`` and ``delta- = c0 - c1 q``: a long book buys less and sells more."""

    c0: float
    c1: float
    n_options: int
    traded: np.ndarray | Sequence[int] | None = None

    def __post_init__(self):
        self.traded = _traded_mask(self.traded, self.n_options)

    def spreads(self, t, q):
        q = np.asarray(q, dtype=float)
        return self.c0 + self.c1 * q, self.c0 - self.c1 * q


@dataclass
class CallableStrategy(QuoteStrategy):
    fn: Callable
    n_options: int
    traded: np.ndarray | Sequence[int] | None = None

    def __post_init__(self):
        self.traded = _traded_mask(self.traded, self.n_options)

    def spreads(self, t, q):
        return self.fn(t, q)


# ---------------------------------------------------------------------------
# backtest


@dataclass(frozen=True)
class BacktestResult:
    """Outputs on ``grid``; ``inventory``, ``flow_net`` and ``mark`` have one column per option."""

    grid: np.ndarray
    fills: EventLog
    inventory: np.ndarray
    cash: np.ndarray
    pnl: np.ndarray
    mark: np.ndarray
    flow_net: np.ndarray
    trade_counts: np.ndarray  # (n_options, 2): buys, sells
    flow: EventLog
    complete: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def n_options(self) -> int:
        return self.inventory.shape[1]


def _coupled_sample(kernel, baseline, horizon, seed):
    """Background cluster sample plus one thinning uniform per event, from split streams."""
    flow_ss, fill_ss = seed_sequence(seed).spawn(2)
    sample = simulate_cluster(kernel, baseline, horizon, np.random.default_rng(flow_ss))
    u = np.random.default_rng(fill_ss).uniform(size=sample.t.size)
    return sample, u


def _run_events(sample, u, fill: FillModel, strategy: QuoteStrategy, sigma0, tick, feedback: bool, grid):
    n_opt = fill.n_options
    order = sample.time_order()
    t_all, c_all, p_all = sample.t, sample.comp, sample.parent
    alive = np.ones(t_all.size, bool)
    filled = np.zeros(t_all.size, bool)
    q = np.zeros(n_opt)
    net = np.zeros(n_opt)
    cash = 0.0
    traded = strategy.traded
    vega = fill.vega
    sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), (n_opt,))

    g_inv = np.zeros((grid.size, n_opt))
    g_cash = np.zeros(grid.size)
    g_net = np.zeros((grid.size, n_opt))
    gi = 0
    error = None
    for idx in order:
        t = t_all[idx]
        while gi < grid.size and grid[gi] < t:
            g_inv[gi], g_cash[gi], g_net[gi] = q, cash, net
            gi += 1
        par = p_all[idx]
        if par >= 0 and not alive[par]:
            alive[idx] = False
            continue
        comp = c_all[idx]
        opt, sign = comp // 2, comp % 2
        if traded[opt]:
            d_plus, d_minus = strategy.spreads(t, q.copy())
            delta = float(np.asarray(d_plus if sign == 0 else d_minus, dtype=float).reshape(-1)[opt])
            if not np.isfinite(delta):
                error = StrategyError(f"strategy returned a non-finite spread at t={t:.6g} for option {opt}")
                break
            if u[idx] < fill.probability(delta, opt):
                filled[idx] = True
                mid = sigma0[opt] + tick * net[opt]
                if sign == 0:  # client sells, book buys at the bid
                    q[opt] += 1
                    cash -= vega[opt] * (mid - delta)
                else:
                    q[opt] -= 1
                    cash += vega[opt] * (mid + delta)
            elif feedback:
                alive[idx] = False
                continue
        net[opt] += 1 if sign == 0 else -1
    while gi < grid.size:
        g_inv[gi], g_cash[gi], g_net[gi] = q, cash, net
        gi += 1
    mark = sigma0[None, :] + tick * g_net
    pnl = g_cash + np.sum(g_inv * vega[None, :] * mark, axis=1)
    return alive, filled, g_inv, g_cash, g_net, mark, pnl, error


def run_backtest(
    kernel: KernelMatrix,
    baseline,
    fill: FillModel,
    strategy: QuoteStrategy,
    horizon: float,
    seed,
    n_grid: int = 101,
    sigma0=0.0,
    tick: float = 1e-4,
    feedback: bool = False,
    scale_baseline: bool = True,
) -> BacktestResult:
    """Event-driven backtest on ``[0, horizon]``.

    The background flow is a Hawkes process with baseline ``mu * lambda_scale``
    (``scale_baseline``) or ``mu``. A request on a traded option fills with
    probability ``Lambda(delta)/lambda_scale``; with ``feedback`` an unfilled
    request is removed from the flow together with everything it would have
    triggered. The mark is ``sigma0 + tick (N+ - N-)`` of the realised flow and
    premia are ``vega`` times the quoted vol.
    """
    if not horizon > 0:
        raise DomainError("horizon must be positive")
    d = kernel.dim
    if d != 2 * fill.n_options:
        raise StructuralError(f"kernel has {d} components, fill model covers {fill.n_options} options")
    mu = fill.request_baseline(baseline) if scale_baseline else _baseline(baseline, d)
    sample, u = _coupled_sample(kernel, mu, horizon, seed)
    grid = np.linspace(0.0, horizon, n_grid)
    return _assemble(sample, u, fill, strategy, sigma0, tick, feedback, grid, d)


def _assemble(sample, u, fill, strategy, sigma0, tick, feedback, grid, d):
    alive, filled, inv, cash, net, mark, pnl, error = _run_events(sample, u, fill, strategy, sigma0, tick, feedback, grid)
    fills = sample.to_log(filled, dim=d)
    flow = sample.to_log(alive, dim=d)
    counts = fills.counts().reshape(-1, 2)
    result = BacktestResult(grid, fills, inv, cash, pnl, mark, net, counts, flow, complete=error is None)
    if error is not None:
        error.partial = result
        raise error
    return result


def cross_impact_price(result: BacktestResult, xi, C0, reference: BacktestResult | None = None) -> np.ndarray:
    """Linear temporary impact in basis points of ``C0``, shape ``(len(grid), n_options)``.

    Without ``reference`` the impact comes from the book's own fills
    ``N+ - N-``; with a coupled ``reference`` run it comes from the difference in
    realised flow, which is what trading one option does to the others.
    """
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (result.n_options,))
    C0 = np.broadcast_to(np.asarray(C0, dtype=float), (result.n_options,))
    if np.any(~(xi > 0)) or np.any(~(C0 > 0)):
        raise DomainError("xi and C0 must be positive")
    if reference is None:
        net = result.inventory
    else:
        if not np.array_equal(reference.grid, result.grid):
            raise StructuralError("results live on different grids")
        net = result.flow_net - reference.flow_net
    return 1e4 * xi[None, :] * net / C0[None, :]


# ---------------------------------------------------------------------------
# market impact


@dataclass(frozen=True)
class ImpactReport:
    """Impact curves on ``t`` in ``[0, 1]`` (fractions of ``T``).

    ``mi_point`` is the signed mean of ``sigma_bar - sigma`` per option and
    ``mi_point_abs`` the mean absolute difference; ``terminal_*`` hold the
    per-seed values at ``t = 1``.
    """

    t: np.ndarray
    mi_total: np.ndarray
    mi_point: np.ndarray
    mi_point_abs: np.ndarray
    se_point_abs: np.ndarray
    terminal_signed: np.ndarray
    terminal_abs: np.ndarray
    cross_bp: np.ndarray | None
    n_seeds: int


def _impact_one(kernel, mu, fill, strategy, horizon, seed, T, alpha, n_grid, sigma0, tick):
    sample, u = _coupled_sample(kernel, mu, horizon, seed)
    grid = np.linspace(0.0, 1.0, n_grid) * T
    alive, *_ = _run_events(sample, u, fill, strategy, sigma0, tick, True, grid)
    d = kernel.dim
    full = sample.to_log(None, dim=d)
    impacted = sample.to_log(alive, dim=d)
    sig = rescaled_net(full.counts_at(grid), T, alpha)
    sig_bar = rescaled_net(impacted.counts_at(grid), T, alpha)
    return sig_bar - sig


def impact_diffs(kernel, baseline, fill, strategy, horizon, seeds, T=None, alpha=0.75, n_grid=101, sigma0=0.0, tick=1e-4, scale_baseline=True):
    """Per-seed ``sigma_bar - sigma`` arrays, shape ``(n_seeds, n_grid, n_options)``."""
    _check_alpha(alpha)
    T = horizon if T is None else float(T)
    if not 0 < T <= horizon:
        raise DomainError("T must lie in (0, horizon]")
    mu = fill.request_baseline(baseline) if scale_baseline else _baseline(baseline, kernel.dim)
    return np.array([_impact_one(kernel, mu, fill, strategy, horizon, s, T, alpha, n_grid, sigma0, tick) for s in seeds])


def summarize_impact(diffs: np.ndarray, xi=None, C0=None, T_scale: float = 1.0) -> ImpactReport:
    n = diffs.shape[0]
    t = np.linspace(0.0, 1.0, diffs.shape[1])
    absd = np.abs(diffs)
    cross = None
    if xi is not None:
        xi = np.asarray(xi, dtype=float)
        C0 = np.asarray(1.0 if C0 is None else C0, dtype=float)
        # convert rescaled flow back to event counts before pricing
        cross = 1e4 * xi * absd.mean(axis=0) * T_scale / C0
    return ImpactReport(
        t=t,
        mi_total=absd.sum(axis=2).mean(axis=0),
        mi_point=diffs.mean(axis=0),
        mi_point_abs=absd.mean(axis=0),
        se_point_abs=absd.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(absd[0]),
        terminal_signed=diffs[:, -1, :],
        terminal_abs=absd[:, -1, :],
        cross_bp=cross,
        n_seeds=n,
    )


def market_impact(
    kernel: KernelMatrix,
    baseline,
    fill: FillModel,
    strategy: QuoteStrategy,
    horizon: float,
    seeds,
    T: float | None = None,
    alpha: float = 0.75,
    n_grid: int = 101,
    xi=None,
    C0=None,
    sigma0=0.0,
    tick: float = 1e-4,
    min_seeds: int = 100,
) -> ImpactReport:
    """``MI(t) = E|sigma_bar_t - sigma_t|_1`` over coupled impacted and unimpacted worlds.

    Both worlds share one background cluster sample and thinning uniforms. The
    impacted world drops unfilled requests on traded options along with their
    offspring, so the difference isolates what trading feeds back into the
    surface. Surfaces are rescaled by ``T^{2 alpha}``.
    """
    seeds = list(seeds)
    if len(seeds) < min_seeds:
        raise DomainError(f"market impact needs at least {min_seeds} seeds, got {len(seeds)}")
    T_eff = horizon if T is None else float(T)
    diffs = impact_diffs(kernel, baseline, fill, strategy, horizon, seeds, T_eff, alpha, n_grid, sigma0, tick)
    return summarize_impact(diffs, xi, C0, T_eff ** (2 * alpha))
