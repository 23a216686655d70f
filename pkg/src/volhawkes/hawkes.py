"""Multivariate Hawkes processes: intensity, exact simulation, stationary moments."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DomainError,
    InstabilityError,
    NumericalError,
    StructuralError,
    SupercriticalWarning,
    UnsupportedKernelError,
)
from .kernels import KernelMatrix, profile, profile_cumulative, sample_lags, spectral_radius

SIGNS = ("+", "-")


@dataclass(frozen=True)
class ComponentIndex:
    strike_label: str
    maturity: float
    sign: str

    def __post_init__(self):
        if not self.maturity > 0:
            raise DomainError(f"maturity must be positive, got {self.maturity}")
        if self.sign not in SIGNS:
            raise DomainError(f"sign must be '+' or '-', got {self.sign!r}")

    @property
    def option(self) -> tuple:
        return (self.strike_label, self.maturity)

    def __str__(self):
        return f"{self.strike_label}@{self.maturity:.6g}{self.sign}"


def component_grid(strike_labels: Sequence[str], maturities: Sequence[float]) -> tuple:
    """Components ordered maturity-major, then strike, then sign (+ before -).

    Option ``(k, m)`` therefore owns positions ``2*(m*K + k)`` (+) and ``2*(m*K + k) + 1`` (-).
    """
    comps = tuple(
        ComponentIndex(str(k), float(tau), s) for tau in maturities for k in strike_labels for s in SIGNS
    )
    if len(set(comps)) != len(comps):
        raise StructuralError("duplicate (strike, maturity, sign) component")
    return comps


@dataclass(frozen=True)
class EventLog:
    """Per-component sorted event times on ``[0, horizon]``."""

    times: tuple
    horizon: float
    components: tuple | None = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")
        times = tuple(np.asarray(t, dtype=float).ravel() for t in self.times)
        for i, t in enumerate(times):
            if t.size and (t[0] < 0 or t[-1] > self.horizon):
                raise DomainError(f"component {i} has events outside [0, horizon]")
            if np.any(np.diff(t) <= 0):
                raise DomainError(f"component {i} event times are not strictly increasing")
            t.setflags(write=False)
        object.__setattr__(self, "times", times)
        if self.components is not None:
            comps = tuple(self.components)
            if len(comps) != len(times):
                raise StructuralError("components must match the number of event lists")
            object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, t, comp, dim: int, horizon: float, components=None) -> "EventLog":
        t = np.asarray(t, dtype=float)
        comp = np.asarray(comp, dtype=int)
        order = np.argsort(t, kind="stable")
        t, comp = t[order], comp[order]
        return cls(tuple(t[comp == i] for i in range(dim)), horizon, components)

    @property
    def dim(self) -> int:
        return len(self.times)

    def counts(self) -> np.ndarray:
        return np.array([t.size for t in self.times])

    def counts_at(self, t) -> np.ndarray:
        """``N_t`` per component (right-continuous), shape ``(len(t), dim)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.searchsorted(ev, t, side="right") for ev in self.times], axis=1)

    def merged(self) -> tuple[np.ndarray, np.ndarray]:
        """All events as ``(times, component)`` sorted by time."""
        if not self.times:
            return np.zeros(0), np.zeros(0, dtype=int)
        t = np.concatenate(self.times)
        c = np.concatenate([np.full(ev.size, i) for i, ev in enumerate(self.times)])
        order = np.argsort(t, kind="stable")
        return t[order], c[order].astype(int)

    def restrict(self, horizon: float) -> "EventLog":
        return EventLog(tuple(ev[ev <= horizon] for ev in self.times), horizon, self.components)


def _baseline(baseline, d: int) -> np.ndarray:
    mu = np.asarray(baseline, dtype=float).ravel()
    if mu.size == 1 and d > 1:
        mu = np.full(d, float(mu[0]))
    if mu.size != d:
        raise StructuralError(f"baseline has {mu.size} entries, kernel has dimension {d}")
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise DomainError("baseline rates must be finite and non-negative")
    return mu


def intensity_at(t: float, log: EventLog, kernel: KernelMatrix, baseline) -> np.ndarray:
    """Left-limit intensity ``mu + sum_j sum_{s < t} phi_ij(t - s)``."""
    d = kernel.dim
    if log.dim != d:
        raise StructuralError(f"event log has {log.dim} components, kernel has dimension {d}")
    mu = _baseline(baseline, d)
    if t < 0:
        raise DomainError("t must be non-negative")
    lam = mu.copy()
    for shape, w in kernel.groups:
        s = np.array([profile(shape, t - ev[ev < t]).sum() for ev in log.times])
        lam += w @ s
    return lam


def intensity_path(log: EventLog, kernel: KernelMatrix, baseline, grid) -> np.ndarray:
    return np.array([intensity_at(float(t), log, kernel, baseline) for t in np.asarray(grid, float)])


def compensator(log: EventLog, kernel: KernelMatrix, baseline, grid) -> np.ndarray:
    """Exact ``int_0^t lambda_s ds`` on ``grid`` using the kernels' closed-form cumulatives."""
    d = kernel.dim
    mu = _baseline(baseline, d)
    grid = np.asarray(grid, dtype=float)
    out = np.outer(grid, mu)
    for shape, w in kernel.groups:
        s = np.stack([profile_cumulative(shape, grid[:, None] - ev[None, :]).sum(axis=1) for ev in log.times], axis=1)
        out += s @ w.T
    return out


# ---------------------------------------------------------------------------
# simulation


def _check_simulable(kernel: KernelMatrix, mu: np.ndarray) -> None:
    if not kernel.is_monotone():
        raise UnsupportedKernelError("thinning needs non-negative, non-increasing kernels")
    try:
        rho = spectral_radius(kernel.integrated())
    except DomainError:
        rho = np.inf
    if rho >= 1:
        warnings.warn(
            f"branching matrix spectral radius {rho:.4g} >= 1; simulating a finite horizon anyway",
            SupercriticalWarning,
            stacklevel=3,
        )


def simulate_thinning(
    kernel: KernelMatrix,
    baseline,
    horizon: float,
    seed: int | np.random.SeedSequence | None,
    max_events: int = 2_000_000,
) -> EventLog:
    """Exact sample on ``[0, horizon]`` by Ogata thinning.

    Kernels are non-increasing, so the total intensity just after the current
    time dominates the intensity until the next event and serves as the bound.
    """
    d = kernel.dim
    mu = _baseline(baseline, d)
    if not horizon > 0:
        raise DomainError("horizon must be positive")
    _check_simulable(kernel, mu)
    rng = np.random.default_rng(seed)

    if kernel.is_zero():
        times = []
        for i in range(d):
            n = rng.poisson(mu[i] * horizon)
            times.append(np.sort(rng.uniform(0.0, horizon, n)))
        return EventLog(tuple(_strict(t) for t in times), horizon)

    if all(shape[0] == "exponential" for shape, _ in kernel.groups):
        t, c = _thin_exponential(kernel, mu, horizon, rng, max_events)
    else:
        t, c = _thin_general(kernel, mu, horizon, rng, max_events)
    return EventLog.from_arrays(t, c, d, horizon)


def _strict(t: np.ndarray) -> np.ndarray:
    # ties have probability zero; guard against float collisions anyway
    if t.size > 1 and np.any(np.diff(t) <= 0):
        t = np.unique(t)
    return t


def _thin_exponential(kernel, mu, horizon, rng, max_events):
    groups = kernel.groups
    betas = np.array([shape[1] for shape, _ in groups])
    ws = [w for _, w in groups]
    d = mu.size
    state = np.zeros((len(groups), d))
    out_t, out_c = [], []
    t = 0.0
    lam = mu.copy()
    while True:
        bound = lam.sum()
        if bound <= 0:
            break
        t_new = t + rng.exponential(1.0 / bound)
        if t_new > horizon:
            break
        state *= np.exp(-betas * (t_new - t))[:, None]
        t = t_new
        lam = mu + sum(w @ s for w, s in zip(ws, state))
        total = lam.sum()
        if rng.uniform() * bound <= total:
            j = min(int(np.searchsorted(np.cumsum(lam), rng.uniform() * total, side="right")), d - 1)
            out_t.append(t)
            out_c.append(j)
            state[:, j] += 1.0
            lam = lam + np.array([w[:, j] for w in ws]).sum(axis=0)
            if len(out_t) > max_events:
                raise NumericalError(f"more than {max_events} events; reduce the horizon")
    return np.array(out_t), np.array(out_c, dtype=int)


def _thin_general(kernel, mu, horizon, rng, max_events):
    groups = kernel.groups
    d = mu.size
    cap = 1024
    ev_t = np.empty(cap)
    ev_c = np.empty(cap, dtype=int)
    n = 0

    def intensity(s):
        lam = mu.copy()
        if n:
            lags = s - ev_t[:n]
            for shape, w in groups:
                lam += w @ np.bincount(ev_c[:n], weights=profile(shape, lags), minlength=d)
        return lam

    jumps = kernel.at_zero()
    t = 0.0
    lam_plus = mu.copy()
    while True:
        bound = lam_plus.sum()
        if bound <= 0:
            break
        t += rng.exponential(1.0 / bound)
        if t > horizon:
            break
        lam = intensity(t)
        total = lam.sum()
        if rng.uniform() * bound <= total:
            j = min(int(np.searchsorted(np.cumsum(lam), rng.uniform() * total, side="right")), d - 1)
            if n == cap:
                cap *= 2
                ev_t = np.resize(ev_t, cap)
                ev_c = np.resize(ev_c, cap)
            ev_t[n], ev_c[n] = t, j
            n += 1
            if n > max_events:
                raise NumericalError(f"more than {max_events} events; reduce the horizon")
            lam_plus = lam + jumps[:, j]
        else:
            lam_plus = lam
    return ev_t[:n].copy(), ev_c[:n].copy()


@dataclass(frozen=True)
class ClusterSample:
    """Events of one branching (cluster) sample, in generation order.

    ``parent[i]`` is the index of the event that triggered event ``i`` or -1
    for immigrants.
    """

    t: np.ndarray
    comp: np.ndarray
    parent: np.ndarray
    horizon: float

    def time_order(self) -> np.ndarray:
        return np.argsort(self.t, kind="stable")

    def to_log(self, keep=None, dim: int | None = None, components=None) -> EventLog:
        d = dim if dim is not None else int(self.comp.max(initial=-1)) + 1
        mask = np.ones(self.t.size, bool) if keep is None else np.asarray(keep, bool)
        return EventLog.from_arrays(self.t[mask], self.comp[mask], d, self.horizon, components)


def simulate_cluster(
    kernel: KernelMatrix,
    baseline,
    horizon: float,
    rng: np.random.Generator,
    max_events: int = 5_000_000,
) -> ClusterSample:
    """Branching (cluster) representation of the same Hawkes law.

    Immigrants arrive as Poisson(mu); an event of type ``j`` at ``s`` spawns
    Poisson(``int_0^{horizon-s} phi_ij``) children of type ``i`` with lags drawn
    from the normalised kernel restricted to the remaining horizon.
    """
    d = kernel.dim
    mu = _baseline(baseline, d)
    if not kernel.is_monotone():
        raise UnsupportedKernelError("cluster simulation needs non-negative kernels")
    ts, cs, ps = [], [], []
    n_imm = rng.poisson(mu * horizon)
    gen_t = np.concatenate([rng.uniform(0.0, horizon, k) for k in n_imm]) if n_imm.sum() else np.zeros(0)
    gen_c = np.repeat(np.arange(d), n_imm)
    gen_p = np.full(gen_t.size, -1)
    offset = 0
    total = 0
    while gen_t.size:
        ts.append(gen_t)
        cs.append(gen_c)
        ps.append(gen_p)
        idx = offset + np.arange(gen_t.size)
        offset += gen_t.size
        total += gen_t.size
        if total > max_events:
            raise NumericalError(f"more than {max_events} events in the cluster sample")
        rem = horizon - gen_t
        nt, nc, npar = [], [], []
        for shape, w in kernel.groups:
            means = w[:, gen_c] * profile_cumulative(shape, rem)[None, :]
            counts = rng.poisson(means)
            k = counts.sum()
            if k == 0:
                continue
            tgt, par = np.nonzero(counts)
            reps = counts[tgt, par]
            tgt = np.repeat(tgt, reps)
            par = np.repeat(par, reps)
            lags = sample_lags(shape, rng.uniform(size=k), rem[par])
            nt.append(np.minimum(gen_t[par] + lags, horizon))
            nc.append(tgt)
            npar.append(idx[par])
        if not nt:
            break
        gen_t = np.concatenate(nt)
        gen_c = np.concatenate(nc)
        gen_p = np.concatenate(npar)
    if not ts:
        return ClusterSample(np.zeros(0), np.zeros(0, int), np.zeros(0, int), horizon)
    return ClusterSample(np.concatenate(ts), np.concatenate(cs), np.concatenate(ps), horizon)


def simulate_branching(kernel: KernelMatrix, baseline, horizon: float, seed) -> EventLog:
    """Cluster-based sampler; an independent route to the same law as thinning."""
    sample = simulate_cluster(kernel, baseline, horizon, np.random.default_rng(seed))
    return sample.to_log(dim=kernel.dim)


# ---------------------------------------------------------------------------
# first-moment diagnostics


def branching_matrix(kernel: KernelMatrix) -> np.ndarray:
    return kernel.integrated()


def _stable_resolvent(phi: np.ndarray) -> np.ndarray:
    rho = spectral_radius(phi)
    if rho >= 1:
        raise InstabilityError(f"branching matrix spectral radius {rho:.6g} >= 1: no stationary regime")
    return np.linalg.inv(np.eye(phi.shape[0]) - phi)


def stationary_intensity(kernel: KernelMatrix, baseline) -> np.ndarray:
    """``(I - Phi)^{-1} mu`` for a stable kernel."""
    mu = _baseline(baseline, kernel.dim)
    phi = branching_matrix(kernel)
    _stable_resolvent(phi)
    return np.linalg.solve(np.eye(kernel.dim) - phi, mu)


def psi_integral(kernel: KernelMatrix | np.ndarray) -> np.ndarray:
    """Entrywise mass of ``psi = sum_l phi^{*l}``, i.e. ``(I - Phi)^{-1} Phi``."""
    phi = branching_matrix(kernel) if isinstance(kernel, KernelMatrix) else np.asarray(kernel, float)
    _stable_resolvent(phi)
    return np.linalg.solve(np.eye(phi.shape[0]) - phi, phi)


def expected_intensity_path(kernel: KernelMatrix, baseline, t_grid=None, horizon: float | None = None, steps: int = 2000):
    """Solve ``m(t) = mu + int_0^t phi(t-u) m(u) du`` by the trapezoidal rule.

    The diagonal term is treated implicitly, so each step solves
    ``(I - h/2 phi(0)) m_n = rhs``. Works on non-uniform grids starting at 0.
    """
    d = kernel.dim
    mu = _baseline(baseline, d)
    if t_grid is None:
        if horizon is None:
            raise StructuralError("give either t_grid or horizon")
        t_grid = np.linspace(0.0, horizon, steps + 1)
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 1 or t[0] != 0 or np.any(np.diff(t) <= 0):
        raise DomainError("t_grid must be strictly increasing from 0")
    m = np.empty((t.size, d))
    m[0] = mu
    phi0 = kernel.at_zero()
    groups = kernel.groups
    eye = np.eye(d)
    for n in range(1, t.size):
        # trapezoid weights on [t_0, t_n]
        h = np.diff(t[: n + 1])
        wq = np.zeros(n + 1)
        wq[:-1] += h / 2
        wq[1:] += h / 2
        rhs = mu.copy()
        lags = t[n] - t[:n]
        for shape, w in groups:
            prof = profile(shape, lags) * wq[:n]
            rhs += w @ (prof @ m[:n])
        m[n] = np.linalg.solve(eye - wq[n] * phi0, rhs)
    return m
