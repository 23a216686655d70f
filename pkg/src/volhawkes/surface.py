"""Tick-by-tick implied-volatility surface built on a signed Hawkes process.

Each option ``(k, tau)`` owns two Hawkes components, ``+`` (volatility up one
tick) and ``-`` (down one tick). The functions here turn event logs into
surface paths, construct kernels satisfying the calendar, wing and convexity
relations, check those relations, and compute slice-shape diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import DegeneracyError, DomainError, StructuralError
from .hawkes import EventLog, component_grid, stationary_intensity
from .kernels import KernelFn, KernelMatrix, KernelSum, ZERO

CANONICAL = ("-10DP", "-25DP", "50D", "25DC", "10DC")
DEFAULT_MONEYNESS = {"-10DP": 0.95, "-25DP": 0.98, "50D": 1.0, "25DC": 1.02, "10DC": 1.05}

_ALIASES = {
    "-10DP": "-10DP", "-10ΔP": "-10DP", "10DP": "-10DP", "10P": "-10DP", "-10P": "-10DP",
    "-25DP": "-25DP", "-25ΔP": "-25DP", "25DP": "-25DP", "25P": "-25DP", "-25P": "-25DP",
    "50D": "50D", "50Δ": "50D", "ATM": "50D", "50": "50D",
    "25DC": "25DC", "25ΔC": "25DC", "25C": "25DC",
    "10DC": "10DC", "10ΔC": "10DC", "10C": "10DC",
}


def canonical_label(label) -> str:
    """Normalise a delta-convention strike label (``"25ΔC"`` -> ``"25DC"``)."""
    if isinstance(label, str):
        key = label.strip().upper().replace("Δ", "D").replace("δ", "D")
        key = _ALIASES.get(key, _ALIASES.get(label.strip(), key))
        return key
    return f"{float(label):g}"


@dataclass(frozen=True)
class SurfaceGrid:
    """Strike x maturity grid with tick size and initial surface level.

    ``strikes`` holds delta labels (mapped to moneyness via ``moneyness_map``)
    or raw moneyness values. Strikes must be ordered left to right.
    """

    strikes: tuple
    maturities: tuple
    tick: float = 1.0
    sigma0: object = 0.0
    moneyness_map: Mapping | None = None

    def __post_init__(self):
        if len(self.strikes) == 0:
            raise StructuralError("grid needs at least one strike")
        mapping = dict(DEFAULT_MONEYNESS)
        if self.moneyness_map:
            mapping.update({canonical_label(k): float(v) for k, v in self.moneyness_map.items()})
        labels, money = [], []
        for k in self.strikes:
            if isinstance(k, str):
                lab = canonical_label(k)
                if lab not in mapping:
                    raise StructuralError(f"unknown strike label {k!r}")
                labels.append(lab)
                money.append(mapping[lab])
            else:
                labels.append(canonical_label(k))
                money.append(float(k))
        money = np.array(money)
        if np.any(money <= 0) or np.any(np.diff(money) <= 0):
            raise DomainError("strikes must be positive and ordered left to right")
        if len(set(labels)) != len(labels):
            raise StructuralError("duplicate strike labels")
        taus = np.asarray(self.maturities, dtype=float).ravel()
        if taus.size == 0:
            raise StructuralError("grid needs at least one maturity")
        if np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
            raise DomainError("maturities must be positive and strictly increasing")
        if not self.tick > 0:
            raise DomainError("tick must be positive")
        s0 = np.broadcast_to(np.asarray(self.sigma0, dtype=float), (taus.size, len(labels))).copy()
        if np.any(s0 < 0):
            raise DomainError("initial surface values must be non-negative")
        s0.setflags(write=False)
        object.__setattr__(self, "strikes", tuple(labels))
        object.__setattr__(self, "maturities", tuple(float(x) for x in taus))
        object.__setattr__(self, "sigma0", s0)
        object.__setattr__(self, "_moneyness", tuple(money))
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    @property
    def moneyness(self) -> np.ndarray:
        return np.array(self._moneyness)

    @property
    def n_strikes(self) -> int:
        return len(self.strikes)

    @property
    def n_maturities(self) -> int:
        return len(self.maturities)

    @property
    def n_options(self) -> int:
        return self.n_strikes * self.n_maturities

    @property
    def dim(self) -> int:
        return 2 * self.n_options

    @property
    def components(self) -> tuple:
        return component_grid(self.strikes, self.maturities)

    def option_labels(self) -> list[str]:
        return [f"{k}@{tau:.6g}" for tau in self.maturities for k in self.strikes]

    def strike_index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            return int(label)
        hit = self._index.get(label)
        if hit is not None:
            return hit
        lab = canonical_label(label)
        try:
            return self.strikes.index(lab)
        except ValueError:
            raise StructuralError(f"strike {label!r} is not on the grid") from None

    def has(self, label) -> bool:
        return canonical_label(label) in self.strikes

    def option(self, strike, m: int = 0) -> int:
        return m * self.n_strikes + self.strike_index(strike)

    def position(self, strike, m: int, sign: str) -> int:
        return 2 * self.option(strike, m) + (0 if sign == "+" else 1)


@dataclass(frozen=True)
class SurfaceModel:
    grid: SurfaceGrid
    kernel: KernelMatrix
    mu: np.ndarray

    def __post_init__(self):
        if self.kernel.dim != self.grid.dim:
            raise StructuralError(f"kernel dimension {self.kernel.dim} does not match grid dimension {self.grid.dim}")
        mu = np.asarray(self.mu, dtype=float).ravel()
        if mu.size == 1:
            mu = np.full(self.grid.dim, float(mu[0]))
        if mu.size != self.grid.dim:
            raise StructuralError("baseline length does not match grid dimension")
        if np.any(mu < 0):
            raise DomainError("baseline rates must be non-negative")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    def with_(self, kernel=None, mu=None) -> "SurfaceModel":
        return SurfaceModel(self.grid, self.kernel if kernel is None else kernel, self.mu if mu is None else mu)

    def stationary_intensity(self) -> np.ndarray:
        return stationary_intensity(self.kernel, self.mu)

    def net_drift(self) -> np.ndarray:
        """Stationary ``lambda+ - lambda-`` per option, shape ``(M, K)``."""
        lam = self.stationary_intensity()
        return (lam[0::2] - lam[1::2]).reshape(self.grid.n_maturities, self.grid.n_strikes)


# ---------------------------------------------------------------------------
# microscopic paths


@dataclass(frozen=True)
class MicroSurfacePath:
    """Piecewise-constant surface ``sigma0 + tick (N+ - N-)``.

    ``values[i]`` holds the surface on ``[times[i], times[i+1])``; ``times[0] = 0``.
    The raw process is never clamped, so values may go negative.
    """

    grid: SurfaceGrid
    times: np.ndarray
    values: np.ndarray
    horizon: float

    def at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.values[np.maximum(idx, 0)]

    def reported(self, t) -> np.ndarray:
        """Surface values clamped at 0 for display."""
        return np.maximum(self.at(t), 0.0)


def surface_from_events(grid: SurfaceGrid, log: EventLog) -> MicroSurfacePath:
    if log.dim != grid.dim:
        raise StructuralError(f"event log has {log.dim} components, grid needs {grid.dim}")
    t, c = log.merged()
    step = np.where(c % 2 == 0, 1, -1)
    opt = c // 2
    M, K = grid.n_maturities, grid.n_strikes
    incr = np.zeros((t.size, M * K))
    incr[np.arange(t.size), opt] = step
    net = np.cumsum(incr, axis=0)
    values = np.empty((t.size + 1, M, K))
    values[0] = grid.sigma0
    values[1:] = grid.sigma0 + grid.tick * net.reshape(t.size, M, K)
    return MicroSurfacePath(grid, np.concatenate([[0.0], t]), values, log.horizon)


def sigma_at(grid: SurfaceGrid, log: EventLog, t) -> np.ndarray:
    """Surface at times ``t`` straight from counts, shape ``(len(t), M, K)``."""
    n = log.counts_at(t)
    net = (n[:, 0::2] - n[:, 1::2]).reshape(-1, grid.n_maturities, grid.n_strikes)
    return grid.sigma0 + grid.tick * net


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class NoArbBetas:
    beta_mu_plus: float = 1.0
    beta_mu_minus: float = 1.0
    beta_phi_plus: float = 1.0
    beta_phi_minus: float = 1.0
    beta_wing: float = 0.9
    beta_B: float = 1.0
    beta_Btilde: float = 1.2
    beta_RR_25: float = 1.0
    beta_RR_10: float = 1.0
    beta_SS: float = 1.0

    def __post_init__(self):
        for name in ("beta_mu_plus", "beta_mu_minus", "beta_phi_plus", "beta_phi_minus"):
            if not getattr(self, name) >= 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.beta_wing < 1:
            raise DomainError(f"beta_wing must lie in (0, 1), got {self.beta_wing}")
        if not self.beta_B >= 1:
            raise DomainError(f"beta_B must be >= 1, got {self.beta_B}")
        if not self.beta_Btilde > 1:
            raise DomainError(f"beta_Btilde must be > 1, got {self.beta_Btilde}")
        for name in ("beta_RR_25", "beta_RR_10", "beta_SS"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    def phi(self, sign: str) -> float:
        return self.beta_phi_plus if sign == "+" else self.beta_phi_minus

    def mu(self, sign: str) -> float:
        return self.beta_mu_plus if sign == "+" else self.beta_mu_minus

    @property
    def convexity_direction(self) -> str:
        if self.beta_Btilde > self.beta_B:
            return "increasing"
        if self.beta_Btilde < self.beta_B:
            return "decreasing"
        return "flat"


# ---------------------------------------------------------------------------
# row-level constructors


def _scale_row(row: Iterable[KernelFn], factor: float) -> tuple:
    return tuple(f.scaled(factor) for f in row)


def extend_calendar(base_row, base_mu: float, tau_j: float, tau_i: float, betas: NoArbBetas, sign: str = "+"):
    """Kernel row and baseline of maturity ``tau_i`` from those of ``tau_j <= tau_i``.

    Both are the base scaled by ``beta * sqrt(tau_j / tau_i)``, with the beta of
    the row's sign.
    """
    if not tau_j > 0 or tau_i < tau_j:
        raise DomainError(f"need 0 < tau_j <= tau_i, got tau_j={tau_j}, tau_i={tau_i}")
    root = np.sqrt(tau_j / tau_i)
    return _scale_row(base_row, betas.phi(sign) * root), float(base_mu) * betas.mu(sign) * root


def extend_wing(base_row, base_mu: float, k_j: float, k_i: float, beta_wing: float):
    """Wing row and baseline at strike ``k_i`` as ``beta sqrt(k_i / k_j)`` times those at ``k_j``."""
    if not 0 < beta_wing < 1:
        raise DomainError(f"beta_wing must lie in (0, 1), got {beta_wing}")
    if not (k_i > 0 and k_j > 0):
        raise DomainError("wing strikes must be positive")
    factor = beta_wing * np.sqrt(k_i / k_j)
    return _scale_row(base_row, factor), float(base_mu) * factor


def _weights(f: KernelFn) -> dict:
    return {s: w for s, w in f.term_weights().items() if w != 0}


def _rescale_pair(p: KernelFn, c: KernelFn, a: KernelFn, beta: float, what: str):
    """Scale wings ``p, c`` by one common factor per profile so that (p+c)/2 = beta a."""
    wp, wc, wa = _weights(p), _weights(c), _weights(a)
    new_p, new_c = [], []
    for shape in set(wp) | set(wc) | set(wa):
        x, y, z = wp.get(shape, 0.0), wc.get(shape, 0.0), wa.get(shape, 0.0)
        if x + y == 0:
            if z != 0:
                raise DegeneracyError(f"{what}: wings are zero but the ATM entry is not")
            continue
        if z == 0:
            raise DegeneracyError(f"{what}: ATM entry is zero but the wings are not")
        f = 2 * beta * z / (x + y)
        new_p.append((x * f, shape))
        new_c.append((y * f, shape))
    return KernelSum(tuple(new_p)) if new_p else ZERO, KernelSum(tuple(new_c)) if new_c else ZERO


def _rescale_put(p: KernelFn, c: KernelFn, a: KernelFn, beta: float, what: str):
    """Set the put entry to ``2 beta a - c`` leaving the call untouched."""
    wc, wa = _weights(c), _weights(a)
    parts = []
    for shape in set(wc) | set(wa):
        v = 2 * beta * wa.get(shape, 0.0) - wc.get(shape, 0.0)
        if v < -1e-15 * max(abs(wc.get(shape, 0.0)), 1.0):
            raise DegeneracyError(f"{what}: put entry would be negative ({v:.3g}); raise beta_Btilde or lower beta_wing")
        if v > 0:
            parts.append((v, shape))
    _ = p
    return KernelSum(tuple(parts)) if parts else ZERO, c


def _impose_convexity(model: SurfaceModel, beta: float, put: str, call: str, slices, adjust: str, tag: str):
    g = model.grid
    for lab in (put, "50D", call):
        if not g.has(lab):
            raise StructuralError(f"{tag} needs strike {lab} on the grid")
    rows = [list(r) for r in model.kernel.entries]
    mu = np.array(model.mu, dtype=float)
    for m in slices:
        for s in "+-":
            ip, ia, ic = (g.position(put, m, s), g.position("50D", m, s), g.position(call, m, s))
            for col in range(g.dim):
                what = f"{tag} slice {m} sign {s} column {col}"
                fn = _rescale_pair if adjust == "symmetric" else _rescale_put
                rows[ip][col], rows[ic][col] = fn(rows[ip][col], rows[ic][col], rows[ia][col], beta, what)
            # baselines follow the same rule so the expectation-level relation holds
            x, y, z = mu[ip], mu[ic], mu[ia]
            if adjust == "symmetric":
                if x + y == 0 and z != 0 or z == 0 and x + y != 0:
                    raise DegeneracyError(f"{tag} slice {m} sign {s}: baseline wings and ATM are inconsistent")
                if x + y:
                    f = 2 * beta * z / (x + y)
                    mu[ip], mu[ic] = x * f, y * f
            else:
                v = 2 * beta * z - y
                if v < 0:
                    raise DegeneracyError(f"{tag} slice {m} sign {s}: put baseline would be negative")
                mu[ip] = v
    return model.with_(kernel=KernelMatrix(tuple(tuple(r) for r in rows), model.kernel.labels), mu=mu)


def impose_atm_convexity(model: SurfaceModel, beta_B: float, slices=None) -> SurfaceModel:
    """Rescale the 25-delta wing rows so their mean is ``beta_B`` times the ATM row,
    entry by entry (per source column and per sign row)."""
    if not beta_B >= 1:
        raise DomainError(f"beta_B must be >= 1, got {beta_B}")
    slices = range(model.grid.n_maturities) if slices is None else slices
    return _impose_convexity(model, beta_B, "-25DP", "25DC", slices, "symmetric", "ATM convexity")


def impose_10d_convexity(model: SurfaceModel, beta_Btilde: float, adjust: str = "symmetric", slices=None) -> SurfaceModel:
    """10-delta analogue of :func:`impose_atm_convexity`.

    ``adjust="put"`` solves for the put row only, keeping a call row already
    fixed by the wing relation.
    """
    if not beta_Btilde > 1:
        raise DomainError(f"beta_Btilde must be > 1, got {beta_Btilde}")
    if adjust not in ("symmetric", "put"):
        raise DomainError("adjust must be 'symmetric' or 'put'")
    slices = range(model.grid.n_maturities) if slices is None else slices
    return _impose_convexity(model, beta_Btilde, "-10DP", "10DC", slices, adjust, "10D convexity")


def _mode_labels(mode: str) -> tuple:
    if mode == "three_point":
        return ("-25DP", "50D", "25DC")
    if mode == "five_point":
        return CANONICAL
    raise DomainError(f"mode must be 'three_point' or 'five_point', got {mode!r}")


def default_wing_pairs(mode: str) -> tuple:
    """(reference, wing) strike pairs bound by the wing relation."""
    return () if mode == "three_point" else (("25DC", "10DC"),)


def build_arbitrage_free(model: SurfaceModel, betas: NoArbBetas, mode: str = "three_point") -> SurfaceModel:
    """Project a model onto the no-arbitrage set using its first slice as the base.

    Order: ATM convexity, then (five points) the wing relation 25C -> 10C and
    the 10-delta convexity solved on the put row, then every later maturity is
    generated from the previous one by the calendar relation.
    """
    g = model.grid
    labels = _mode_labels(mode)
    for lab in labels:
        if not g.has(lab):
            raise StructuralError(f"{mode} mode needs strike {lab} on the grid")
    out = impose_atm_convexity(model, betas.beta_B, slices=[0])
    if mode == "five_point":
        rows = list(out.kernel.entries)
        mu = np.array(out.mu)
        money = g.moneyness
        for ref, wing in default_wing_pairs(mode):
            for s in "+-":
                i_ref, i_w = g.position(ref, 0, s), g.position(wing, 0, s)
                rows[i_w], mu[i_w] = extend_wing(
                    rows[i_ref], mu[i_ref], money[g.strike_index(ref)], money[g.strike_index(wing)], betas.beta_wing
                )
        out = out.with_(kernel=KernelMatrix(tuple(rows), out.kernel.labels), mu=mu)
        out = impose_10d_convexity(out, betas.beta_Btilde, adjust="put", slices=[0])
    return apply_calendar(out, betas)


def apply_calendar(model: SurfaceModel, betas: NoArbBetas) -> SurfaceModel:
    """Regenerate every maturity after the first from its predecessor."""
    g = model.grid
    rows = list(model.kernel.entries)
    mu = np.array(model.mu)
    for m in range(1, g.n_maturities):
        for k in range(g.n_strikes):
            for s in "+-":
                src, dst = g.position(k, m - 1, s), g.position(k, m, s)
                rows[dst], mu[dst] = extend_calendar(
                    rows[src], mu[src], g.maturities[m - 1], g.maturities[m], betas, s
                )
    return model.with_(kernel=KernelMatrix(tuple(rows), model.kernel.labels), mu=mu)


# ---------------------------------------------------------------------------
# membership check


@dataclass(frozen=True)
class Violation:
    condition: str
    slice: float
    strike: str
    sign: str
    source: str
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.lhs - self.rhs

    def as_row(self) -> dict:
        return {
            "condition": self.condition,
            "slice": self.slice,
            "strike": self.strike,
            "sign": self.sign,
            "source": self.source,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
        }


REPORT_COLUMNS = ("condition", "slice", "strike", "sign", "source", "lhs", "rhs", "margin")


def _close(x: float, y: float, rtol: float) -> bool:
    return abs(x - y) <= rtol * max(abs(x), abs(y)) or abs(x - y) <= 1e-300


def is_arbitrage_free(
    model: SurfaceModel,
    betas: NoArbBetas,
    mode: str = "three_point",
    wing_pairs=None,
    rtol: float = 1e-9,
) -> tuple[bool, list[Violation]]:
    """Check the calendar, wing and convexity relations entry by entry.

    Calendar and wing relations cover kernel rows and baselines; the convexity
    relations cover kernel entries. Returns ``(ok, violations)``.
    """
    g = model.grid
    for lab in _mode_labels(mode):
        if not g.has(lab):
            raise StructuralError(f"{mode} mode needs strike {lab} on the grid")
    K = model.kernel
    mu = model.mu
    cols = [str(c) for c in g.components]
    out: list[Violation] = []
    # one weight matrix per time profile: relations are compared termwise
    W = np.stack([w for _, w in K.groups]) if K.groups else np.zeros((1, g.dim, g.dim))
    # each relation reads  a1 * row[i1] + a2 * row[i2] == b * row[j]
    rel_meta, i1, a1, i2, a2, jj, bb = [], [], [], [], [], [], []

    def add(meta, r1, c1, r2, c2, r3, c3):
        rel_meta.append(meta)
        i1.append(r1), a1.append(c1), i2.append(r2), a2.append(c2), jj.append(r3), bb.append(c3)

    # calendar, adjacent maturities
    for m in range(1, g.n_maturities):
        root = np.sqrt(g.maturities[m - 1] / g.maturities[m])
        for k in range(g.n_strikes):
            for s in "+-":
                i, j = g.position(k, m, s), g.position(k, m - 1, s)
                add(("calendar", g.maturities[m], g.strikes[k], s), i, 1.0, i, 0.0, j, betas.phi(s) * root)
                expect = betas.mu(s) * root * mu[j]
                if not _close(mu[i], expect, rtol):
                    out.append(Violation("calendar", g.maturities[m], g.strikes[k], s, "mu", mu[i], expect))

    # wings
    pairs = default_wing_pairs(mode) if wing_pairs is None else wing_pairs
    money = g.moneyness
    for ref, wing in pairs:
        f = betas.beta_wing * np.sqrt(money[g.strike_index(wing)] / money[g.strike_index(ref)])
        lab = g.strikes[g.strike_index(wing)]
        for m in range(g.n_maturities):
            for s in "+-":
                i, j = g.position(wing, m, s), g.position(ref, m, s)
                add(("wing", g.maturities[m], lab, s), i, 1.0, i, 0.0, j, f)
                if not _close(mu[i], f * mu[j], rtol):
                    out.append(Violation("wing", g.maturities[m], lab, s, "mu", mu[i], f * mu[j]))

    # convexity
    conv = [("atm_convexity", "-25DP", "25DC", betas.beta_B)]
    if mode == "five_point":
        conv.append(("10d_convexity", "-10DP", "10DC", betas.beta_Btilde))
    for name, put, call, beta in conv:
        for m in range(g.n_maturities):
            for s in "+-":
                ip, ia, ic = g.position(put, m, s), g.position("50D", m, s), g.position(call, m, s)
                add((name, g.maturities[m], "50D", s), ip, 0.5, ic, 0.5, ia, beta)

    if rel_meta:
        lhs = np.asarray(a1)[None, :, None] * W[:, i1, :] + np.asarray(a2)[None, :, None] * W[:, i2, :]
        rhs = np.asarray(bb)[None, :, None] * W[:, jj, :]
        gap = np.abs(lhs - rhs)
        bad = (gap > rtol * np.maximum(np.abs(lhs), np.abs(rhs))) & (gap > 1e-300)
        worst = np.argmax(np.where(bad, gap, -1.0), axis=0)
        found = []
        for r, col in zip(*np.nonzero(bad.any(axis=0))):
            w = worst[r, col]
            found.append((r, Violation(*rel_meta[r], cols[col], float(lhs[w, r, col]), float(rhs[w, r, col]))))
        # kernel violations first in relation order, baselines after, as before
        mu_rows = out
        out = [v for _, v in sorted(found, key=lambda x: x[0])] + mu_rows
    return not out, out


# ---------------------------------------------------------------------------
# empirical calendar check


@dataclass(frozen=True)
class CalendarReport:
    passed: bool
    worst_margin: float
    worst_index: tuple
    margins: np.ndarray
    pathwise_violation_rate: float


def check_calendar_empirical(sigma, maturities, n_se: float = 2.0) -> CalendarReport:
    """Statistical calendar check on an ensemble of surface samples.

    ``sigma`` has shape ``(n_paths, n_times, M, K)``. For adjacent maturities the
    paired difference of total variance ``sigma^2 tau`` must have a mean no lower
    than ``-n_se`` standard errors. ``margins`` holds ``mean + n_se * se`` with
    shape ``(n_times, M-1, K)``.
    """
    s = np.asarray(sigma, dtype=float)
    taus = np.asarray(maturities, dtype=float)
    if s.ndim != 4 or s.shape[2] != taus.size:
        raise StructuralError("sigma must have shape (paths, times, maturities, strikes)")
    if taus.size < 2:
        raise StructuralError("calendar check needs at least two maturities")
    n = s.shape[0]
    if n < 2:
        raise DomainError("calendar check needs at least two paths")
    varpi = s**2 * taus[None, None, :, None]
    diff = varpi[:, :, 1:, :] - varpi[:, :, :-1, :]
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / np.sqrt(n)
    margins = mean + n_se * se
    idx = np.unravel_index(np.argmin(margins), margins.shape)
    worst = float(margins[idx])
    return CalendarReport(worst >= 0, worst, tuple(int(i) for i in idx), margins, float(np.mean(diff < 0)))


# ---------------------------------------------------------------------------
# slice shape


@dataclass(frozen=True)
class SliceShape:
    RR_25: float
    BF_25: float
    RR_10: float
    BF_10: float


def slice_shape(sigma_slice: Mapping) -> SliceShape:
    """Risk reversals and butterflies of one slice given ``{strike_label: sigma}``."""
    vals = {canonical_label(k): float(v) for k, v in sigma_slice.items()}
    for lab in ("-25DP", "50D", "25DC"):
        if lab not in vals:
            raise StructuralError(f"slice is missing strike {lab}")
    atm = vals["50D"]
    rr25 = vals["25DC"] - vals["-25DP"]
    bf25 = 0.5 * (vals["25DC"] + vals["-25DP"]) - atm
    if "10DC" in vals and "-10DP" in vals:
        rr10 = vals["10DC"] - vals["-10DP"]
        bf10 = 0.5 * (vals["10DC"] + vals["-10DP"]) - atm
    else:
        rr10 = bf10 = float("nan")
    return SliceShape(rr25, bf25, rr10, bf10)


def slice_dict(grid: SurfaceGrid, values, m: int = 0) -> dict:
    v = np.asarray(values)
    return {lab: v[m, i] for i, lab in enumerate(grid.strikes)}


# ---------------------------------------------------------------------------
# skew and smile control through the baselines


def _resolvent(model: SurfaceModel) -> np.ndarray:
    stationary_intensity(model.kernel, model.mu)  # raises on instability
    return np.linalg.inv(np.eye(model.grid.dim) - model.kernel.integrated())


def _solve_baselines(model: SurfaceModel, constraints, options) -> SurfaceModel:
    """Shift baselines of ``options`` (one sign row each) so linear stationary
    constraints ``c . lambda_bar = 0`` hold. Tries the ``+`` rows first and flips
    an option to its ``-`` row when its shifted baseline would be negative."""
    R = _resolvent(model)
    C = np.array(constraints)
    n = len(options)
    for flips in range(2**n):
        rows = [2 * o + ((flips >> b) & 1) for b, o in enumerate(options)]
        A = C @ R[:, rows]
        b = -(C @ (R @ model.mu))
        try:
            delta = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            continue
        mu = np.array(model.mu)
        mu[rows] += delta
        if np.all(mu[rows] >= 0):
            return model.with_(mu=mu)
    raise DegeneracyError("no non-negative baseline satisfies the requested stationary skew relations")


def _net(grid: SurfaceGrid, label: str, m: int) -> np.ndarray:
    c = np.zeros(grid.dim)
    c[grid.position(label, m, "+")] = 1.0
    c[grid.position(label, m, "-")] = -1.0
    return c


def impose_risk_reversal(model: SurfaceModel, beta_RR: float, m: int | None = None, wing: str = "25") -> SurfaceModel:
    """Adjust call baselines so ``net(call) = beta_RR * net(put)`` at stationarity."""
    g = model.grid
    put, call = ("-25DP", "25DC") if wing == "25" else ("-10DP", "10DC")
    slices = range(g.n_maturities) if m is None else [m]
    out = model
    for mm in slices:
        cons = [_net(g, call, mm) - beta_RR * _net(g, put, mm)]
        out = _solve_baselines(out, cons, [g.option(call, mm)])
    return out


def impose_smile(model: SurfaceModel, betas: NoArbBetas, m: int | None = None) -> SurfaceModel:
    """Impose both risk-reversal relations and the smile-steepness relation.

    The 25-delta relation fixes ``net(25C)``; the smile relation
    ``(b10 - 1) net(-10P) = beta_SS (b25 - 1) net(-25P)`` fixes ``net(-10P)``;
    the 10-delta relation then fixes ``net(10C)``.
    """
    g = model.grid
    b25, b10 = betas.beta_RR_25, betas.beta_RR_10
    if b10 == 1:
        raise DomainError("the smile relation needs beta_RR_10 != 1")
    slices = range(g.n_maturities) if m is None else [m]
    out = model
    for mm in slices:
        cons = [
            _net(g, "25DC", mm) - b25 * _net(g, "-25DP", mm),
            (b10 - 1) * _net(g, "-10DP", mm) - betas.beta_SS * (b25 - 1) * _net(g, "-25DP", mm),
            _net(g, "10DC", mm) - b10 * _net(g, "-10DP", mm),
        ]
        opts = [g.option("25DC", mm), g.option("-10DP", mm), g.option("10DC", mm)]
        out = _solve_baselines(out, cons, opts)
    return out


def _classify(x: float, scale: float, pos: str, neg: str, rtol: float) -> str:
    if abs(x) <= rtol * max(scale, 1e-300):
        return "flat"
    return pos if x > 0 else neg


def skew_control_check(model: SurfaceModel, betas: NoArbBetas, rtol: float = 1e-9) -> list[dict]:
    """Per-slice report of the stationary risk-reversal and smile relations."""
    g = model.grid
    lam = model.stationary_intensity()
    scale = float(np.max(np.abs(lam))) if lam.size else 1.0
    out = []
    for m in range(g.n_maturities):

        def net(lab):
            return lam[g.position(lab, m, "+")] - lam[g.position(lab, m, "-")]

        row = {"slice": g.maturities[m]}
        lhs, rhs = net("25DC"), betas.beta_RR_25 * net("-25DP")
        row.update(rr25_lhs=lhs, rr25_rhs=rhs, rr25_holds=_close(lhs, rhs, rtol) or abs(lhs - rhs) <= rtol * scale)
        rr25 = net("25DC") - net("-25DP")
        row["skew"] = _classify(rr25, scale, "right-skewed", "left-skewed", rtol)
        row["rr25_drift"] = g.tick * rr25
        if g.has("10DC") and g.has("-10DP"):
            lhs10, rhs10 = net("10DC"), betas.beta_RR_10 * net("-10DP")
            row.update(rr10_lhs=lhs10, rr10_rhs=rhs10, rr10_holds=abs(lhs10 - rhs10) <= rtol * max(abs(lhs10), abs(rhs10), scale))
            ss_l = (betas.beta_RR_10 - 1) * net("-10DP")
            ss_r = betas.beta_SS * (betas.beta_RR_25 - 1) * net("-25DP")
            row.update(ss_lhs=ss_l, ss_rhs=ss_r, ss_holds=abs(ss_l - ss_r) <= rtol * max(abs(ss_l), abs(ss_r), scale))
            rr10 = net("10DC") - net("-10DP")
            row["rr10_drift"] = g.tick * rr10
            row["smile"] = _classify(rr10 - rr25, scale, "smile", "skew", rtol)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# butterfly diagnostics


@dataclass(frozen=True)
class GDReport:
    g: np.ndarray
    d: np.ndarray
    min_g: float
    tail_lhs: float
    tail_rhs: float

    @property
    def tail_ok(self) -> bool:
        return self.tail_lhs < self.tail_rhs

    @property
    def butterfly_free(self) -> bool:
        return bool(self.min_g >= 0 and self.tail_ok)


def g_d_diagnostics(varpi, k, tau: float | None = None) -> GDReport:
    """Density-positivity function ``g`` and ``d`` on a discrete log-moneyness slice.

    Derivatives use second-order differences (central inside, one-sided at the
    ends). The tail proxy compares ``sigma^2`` with ``2k/tau`` at the largest
    strike, i.e. total variance with ``2k``.
    """
    w = np.asarray(varpi, dtype=float).ravel()
    k = np.asarray(k, dtype=float).ravel()
    if w.size != k.size:
        raise StructuralError("varpi and strikes must have the same length")
    if w.size < 3:
        raise DomainError("g/d diagnostics need at least 3 strikes")
    if np.any(w <= 0):
        raise DomainError("total variance must be positive")
    if np.any(np.diff(k) <= 0):
        raise DomainError("strikes must be strictly increasing")
    d = -k / np.sqrt(w) + np.sqrt(w) / 2
    w1 = np.gradient(w, k, edge_order=2)
    w2 = np.gradient(w1, k, edge_order=2)
    g = (1 - k * w1 / (2 * w)) ** 2 - w1**2 / 4 * (1 / w + 0.25) + w2 / 2
    if tau is None:
        lhs, rhs = w[-1], 2 * k[-1]
    else:
        lhs, rhs = w[-1] / tau, 2 * k[-1] / tau
    return GDReport(g, d, float(g.min()), float(lhs), float(rhs))
