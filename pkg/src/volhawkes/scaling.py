"""Macroscopic limits: rescaled microscopic paths, rough-Heston factors and the
general triangularizable case."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import schur
from scipy.special import gamma as gamma_fn

from .errors import (
    DegeneracyError,
    DomainError,
    InsufficientDataError,
    LimitNotConvergedWarning,
    StabilityWarning,
    StructuralError,
)
from .hawkes import EventLog, compensator, psi_integral
from .kernels import KernelMatrix, profile_mass, spectral_radius

def seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence for ``seed``; copies a SeedSequence so spawning never mutates the caller's."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


# ---------------------------------------------------------------------------
# rescaled microscopic processes


@dataclass(frozen=True)
class RescaledPaths:
    t: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    sigma: np.ndarray
    T: float
    alpha: float


def _check_alpha(alpha: float, allow_one: bool = False) -> None:
    hi_ok = alpha <= 1 if allow_one else alpha < 1
    if not (alpha > 0.5 and hi_ok):
        raise DomainError(f"alpha must lie in (1/2, 1{']' if allow_one else ')'}, got {alpha}")


def rescaled_net(counts, T: float, alpha: float) -> np.ndarray:
    """``(N+ - N-)/T^{2a}`` per option from signed counts (last axis interleaved +,-)."""
    counts = np.asarray(counts, dtype=float)
    return (counts[..., 0::2] - counts[..., 1::2]) / T ** (2 * alpha)


def rescale(log: EventLog, kernel: KernelMatrix, baseline, T: float, alpha: float, n_grid: int = 101) -> RescaledPaths:
    """``X = N_{tT}/T^{2a}``, ``Y`` its exact compensator, ``Z = T^a (X - Y)`` and
    ``sigma = (N+ - N-)_{tT}/T^{2a}`` on ``t`` in ``[0, 1]``."""
    _check_alpha(alpha)
    if not T > 0:
        raise DomainError("T must be positive")
    if log.horizon < T * (1 - 1e-12):
        raise DomainError(f"event log horizon {log.horizon} is shorter than T={T}")
    t = np.linspace(0.0, 1.0, n_grid)
    scale = T ** (2 * alpha)
    n = log.counts_at(t * T).astype(float)
    X = n / scale
    Y = compensator(log, kernel, baseline, t * T) / scale
    Z = T**alpha * (X - Y)
    sigma = rescaled_net(n, T, alpha)
    return RescaledPaths(t, X, Y, Z, sigma, float(T), float(alpha))


# ---------------------------------------------------------------------------
# fractional Volterra schemes


@dataclass(frozen=True)
class RoughFactorParams:
    """``V = V0 + I^a[speed (theta - V)] + I^a[lambda sqrt(V) dZ]`` and ``F = C int sqrt(V) dW``.

    ``I^a`` is the Riemann-Liouville integral with kernel ``(t-s)^{a-1}/Gamma(a)``;
    ``rho`` is the correlation between ``W`` and ``Z``.
    """

    C: float
    theta: float
    lambda_volvol: float
    alpha: float
    V0: float = 0.0
    speed: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        if not self.C > 0:
            raise DomainError("C must be positive")
        if not self.theta > 0:
            raise DomainError("theta must be positive")
        if not self.lambda_volvol >= 0:
            raise DomainError("lambda_volvol must be non-negative")
        if not self.speed > 0:
            raise DomainError("speed must be positive")
        if not self.V0 >= 0:
            raise DomainError("V0 must be non-negative")
        if not -1 <= self.rho <= 1:
            raise DomainError("rho must lie in [-1, 1]")
        _check_alpha(self.alpha, allow_one=True)


def _noise_weights(alpha: float, h: float, n: int) -> np.ndarray:
    """``b[m-1] = int_{(m-1)h}^{mh} s^{a-1} ds / Gamma(a) / h`` for m = 1..n (cell-averaged kernel)."""
    m = np.arange(1, n + 1, dtype=float)
    return h ** (alpha - 1) * (m**alpha - (m - 1) ** alpha) / gamma_fn(alpha + 1)


def _trapezoid_weights(alpha: float, h: float, n: int):
    """Product-trapezoid weights for ``I^a`` of a piecewise-linear integrand.

    Returns ``(inner, first, last)``: ``inner[m]`` multiplies ``f_{n-m}`` for
    ``1 <= m <= n-1``, ``first[n]`` multiplies ``f_0`` at step ``n`` and ``last``
    multiplies ``f_n``.
    """
    c = h**alpha / gamma_fn(alpha + 2)
    m = np.arange(0, n + 1, dtype=float)
    inner = np.zeros(n + 1)
    inner[1:] = c * ((m[1:] + 1) ** (alpha + 1) - 2 * m[1:] ** (alpha + 1) + (m[1:] - 1) ** (alpha + 1))
    first = np.zeros(n + 1)
    first[1:] = c * ((m[1:] - 1) ** (alpha + 1) - (m[1:] - alpha - 1) * m[1:] ** alpha)
    return inner, first, c


def _volterra_sqrt(theta, speed, vol_cols, alpha, V0, dB, h, drift_matrix=None):
    """Shared scheme for ``V = V0 + I^a[L(theta - V)] + I^a[noise(V) dB]``.

    Drift: product trapezoid, implicit in the newest point (exact for linear
    drift). Noise: cell-averaged kernel times the left-point integrand.
    ``vol_cols(V)`` maps the state ``(P, n)`` to the noise coefficient applied
    to ``dB[:, j]`` with shape ``(P, n, q)``.
    """
    P, steps, q = dB.shape
    n_state = theta.size
    L = speed if drift_matrix is None else drift_matrix
    inner, first, last = _trapezoid_weights(alpha, h, steps)
    b = _noise_weights(alpha, h, steps)
    V = np.empty((P, steps + 1, n_state))
    V[:, 0] = V0
    drift_hist = np.empty((P, steps + 1, n_state))
    noise_hist = np.empty((P, steps, n_state))
    clamps = np.zeros(steps)  # share of paths clamped at each step
    eye = np.eye(n_state)
    solve_mat = np.linalg.inv(eye + last * L)
    drift_hist[:, 0] = (theta - V[:, 0]) @ L.T
    for n in range(1, steps + 1):
        coef, clamped = vol_cols(V[:, n - 1])
        clamps[n - 1] = clamped
        noise_hist[:, n - 1] = np.einsum("pij,pj->pi", coef, dB[:, n - 1])
        acc = V0 + first[n] * drift_hist[:, 0]
        if n > 1:
            acc = acc + np.einsum("m,pmi->pi", inner[n - 1 : 0 : -1], drift_hist[:, 1:n])
        acc = acc + np.einsum("m,pmi->pi", b[n - 1 :: -1], noise_hist[:, :n])
        # implicit newest drift: V_n = acc + last * L (theta - V_n)
        V[:, n] = (acc + last * (theta @ L.T)) @ solve_mat.T
        drift_hist[:, n] = (theta - V[:, n]) @ L.T
    return V, clamps


def simulate_rough_heston(
    params: RoughFactorParams,
    horizon: float,
    steps: int,
    seed,
    n_paths: int | None = None,
):
    """Simulate the rough-Heston factor ``(F, V)`` on a uniform grid.

    Returns ``(t, F, V)``; with ``n_paths`` set the paths are stacked along the
    first axis. The square root uses ``max(V, 0)`` and the stored ``V`` is
    clamped at 0 (full truncation).
    """
    if steps < 10:
        raise DomainError("steps must be >= 10")
    if not horizon > 0:
        raise DomainError("horizon must be positive")
    P = 1 if n_paths is None else int(n_paths)
    rng = np.random.default_rng(seed)
    h = horizon / steps
    dZ = rng.standard_normal((P, steps, 1)) * np.sqrt(h)
    dWp = rng.standard_normal((P, steps)) * np.sqrt(h)
    dW = params.rho * dZ[:, :, 0] + np.sqrt(1 - params.rho**2) * dWp
    lam = params.lambda_volvol

    def vol(v):
        vp = np.maximum(v, 0.0)
        return (lam * np.sqrt(vp))[:, :, None], float(np.mean(v < 0))

    V, _ = _volterra_sqrt(
        np.array([params.theta]), np.array([[params.speed]]), vol, params.alpha, params.V0, dZ, h
    )
    V = np.maximum(V[:, :, 0], 0.0)
    F = np.zeros((P, steps + 1))
    F[:, 1:] = np.cumsum(params.C * np.sqrt(V[:, :-1]) * dW, axis=1)
    t = np.linspace(0.0, horizon, steps + 1)
    if n_paths is None:
        return t, F[0], V[0]
    return t, F, V


def mittag_leffler_mean(alpha: float, theta: float, V0: float, t, speed: float = 1.0, terms: int = 200):
    """Deterministic solution ``theta + (V0 - theta) E_a(-speed t^a)`` (series form)."""
    t = np.asarray(t, dtype=float)
    x = -speed * t**alpha
    k = np.arange(terms)
    from scipy.special import gammaln

    logs = -gammaln(alpha * k + 1)
    out = np.zeros_like(t)
    for kk, lg in zip(k, logs):
        term = np.where(x == 0, 1.0 if kk == 0 else 0.0, np.sign(x) ** kk * np.exp(kk * np.log(np.abs(x) + (x == 0)) + lg))
        out = out + term
    return theta + (V0 - theta) * out


# ---------------------------------------------------------------------------
# factor limit


def simulate_factor_limit(factors, horizon: float, steps: int, seed, n_paths: int | None = None):
    """``sigma_t = sum_i v_i F^i_t`` with independent rough-Heston factors.

    ``factors`` is a sequence of ``(v_i, RoughFactorParams)``; the ``v_i`` must be
    orthonormal. Returns ``(t, sigma, F, V)`` with one column per option in
    ``sigma`` and one per factor in ``F`` and ``V``.
    """
    vs = np.array([np.asarray(v, dtype=float).ravel() for v, _ in factors])
    gram = vs @ vs.T
    if not np.allclose(gram, np.eye(len(factors)), atol=1e-8):
        raise DomainError("factor eigenvectors must be orthonormal")
    children = seed_sequence(seed).spawn(len(factors))
    Fs, Vs = [], []
    t = None
    for (_, params), child in zip(factors, children):
        t, F, V = simulate_rough_heston(params, horizon, steps, child, n_paths=n_paths if n_paths else 1)
        Fs.append(F)
        Vs.append(V)
    F = np.stack(Fs, axis=-1)  # (P, steps+1, r)
    V = np.stack(Vs, axis=-1)
    sigma = F @ vs
    if n_paths is None:
        return t, sigma[0], F[0], V[0]
    return t, sigma, F, V


def orthonormal_factors(z_list) -> list[np.ndarray]:
    """Gram-Schmidt (via QR) keeping the order and orientation of the inputs."""
    Z = np.column_stack([np.asarray(z, dtype=float) for z in z_list])
    q, r = np.linalg.qr(Z)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1
    return [q[:, i] * signs[i] for i in range(q.shape[1])]


# ---------------------------------------------------------------------------
# roughness


def hurst_estimate(path, t=None, lags=(1, 2, 4, 8, 16)) -> float:
    """Second-moment scaling estimate of the Hurst exponent.

    Regresses ``log E|x_{s+l} - x_s|^2`` on ``log l`` and returns half the
    slope. ``path`` may be one path or a stack of paths (moments are pooled).
    """
    x = np.asarray(path, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] < 500:
        raise InsufficientDataError(f"need at least 500 samples, got {x.shape[1]}")
    if t is not None:
        dt = np.diff(np.asarray(t, dtype=float))
        if not np.allclose(dt, dt[0], rtol=1e-8):
            raise DomainError("time grid must be uniform")
    m2 = np.array([np.mean((x[:, l:] - x[:, :-l]) ** 2) for l in lags])
    if np.any(m2 <= 0):
        raise DomainError("path is constant at some lag")
    slope = np.polyfit(np.log(lags), np.log(m2), 1)[0]
    return float(slope / 2)


# ---------------------------------------------------------------------------
# general case


@dataclass(frozen=True)
class GeneralLimitMatrices:
    O: np.ndarray
    O_inv: np.ndarray
    n_c: int
    K: np.ndarray
    M: np.ndarray
    Theta1: np.ndarray
    Theta2: np.ndarray
    theta0: np.ndarray
    Lambda: np.ndarray
    Delta: np.ndarray
    Q: np.ndarray
    mu: np.ndarray
    alpha: float
    A_int: np.ndarray
    B_int: np.ndarray
    C_int: np.ndarray
    delta_converged: bool = True

    @property
    def dim(self) -> int:
        return self.O.shape[0]

    def noise_matrix(self) -> np.ndarray:
        """``[O^{-1}_11 | O^{-1}_12]``: maps the ``d`` Brownian drivers into the ``n_c`` factors."""
        return self.O_inv[: self.n_c, :]

    def Theta(self) -> np.ndarray:
        return np.vstack([self.Theta1, self.Theta2])

    def one_factor_params(self, C: float = 1.0) -> RoughFactorParams:
        """Rough-Heston parameters of ``V~`` when there is a single critical direction."""
        if self.n_c != 1:
            raise StructuralError("one_factor_params needs n_c == 1")
        lam = float(self.Lambda[0, 0])
        theta = self.Theta()[:, 0]
        noise = self.noise_matrix()[0]
        volvol = lam * np.sqrt(np.sum(noise**2 * np.maximum(theta, 0.0)))
        return RoughFactorParams(C=C, theta=float(self.theta0[0]), lambda_volvol=float(volvol), alpha=self.alpha, speed=lam)


def Q_matrix(d: int) -> np.ndarray:
    """Columns ``e_{2i-1} - e_{2i}``: maps signed components to net option moves."""
    if d % 2:
        raise StructuralError("signed dimension must be even")
    Q = np.zeros((d, d // 2))
    for i in range(d // 2):
        Q[2 * i, i] = 1.0
        Q[2 * i + 1, i] = -1.0
    return Q


def _richardson(xs, vals, order: float):
    """Extrapolate ``vals(x) = L + c x^{-order}`` from the last two points."""
    x1, x2 = xs[-2], xs[-1]
    v1, v2 = vals[-2], vals[-1]
    w1, w2 = x1**order, x2**order
    return (w2 * v2 - w1 * v1) / (w2 - w1)


def general_limit_matrices(
    kernel: KernelMatrix,
    baseline,
    alpha: float,
    T_sequence,
    kappa: float = 1.0,
    tol: float = 1e-9,
) -> GeneralLimitMatrices:
    """Limit matrices of the nearly-unstable family ``phi^T = (1 - kappa T^{-a}) phi / rho``.

    ``rho`` is the spectral radius of ``int phi``. The basis ``O`` comes from a
    real Schur form of ``(int phi)^T``,
    which makes ``O^{-1} phi O`` lower block-triangular with the eigenvalues equal
    to ``rho`` in the leading block. ``K`` and ``M`` are
    evaluated on ``T_sequence`` and extrapolated.
    """
    _check_alpha(alpha)
    T_seq = np.sort(np.asarray(T_sequence, dtype=float))
    if T_seq.size < 2 or np.any(T_seq <= 0):
        raise DomainError("T_sequence needs at least two positive values")
    d = kernel.dim
    mu = np.asarray(baseline, dtype=float).ravel()
    if mu.size == 1:
        mu = np.full(d, float(mu[0]))
    if mu.size != d:
        raise StructuralError("baseline length does not match kernel dimension")
    Phi = kernel.integrated()
    Q = Q_matrix(d)
    if not np.any(Phi):
        # no excitation: nothing is critical, the limit is driven by the baseline alone
        raise DegeneracyError("zero kernel has no critical direction (n_c = 0)")
    rho = spectral_radius(Phi)
    # T^a (1 - c_T A) amplifies any error in rho, so snap it to the nearest eigenvalue
    eig = np.linalg.eigvals(Phi)
    rho = float(np.real(eig[np.argmin(np.abs(eig - rho))]))
    # critical directions: eigenvalues on the spectral circle, which the family pushes to 1
    _, U, n_c = schur(Phi.T, output="real", sort=lambda re, im: abs(re - rho) <= 1e-7 * rho and abs(im) <= 1e-7 * rho)
    if n_c == 0:
        raise DegeneracyError("no eigenvalue of int phi sits on its spectral radius")
    # orient the critical directions so the baseline loads positively
    O = U.copy()
    O_inv = U.T.copy()
    for i in range(n_c):
        if O_inv[i] @ mu < 0 or (O_inv[i] @ mu == 0 and O[np.argmax(np.abs(O[:, i])), i] < 0):
            O[:, i] *= -1
            O_inv[i] *= -1

    def blocks(W):
        X = O_inv @ W @ O
        return X[:n_c, :n_c], X[:n_c, n_c:], X[n_c:, :n_c], X[n_c:, n_c:]

    # time-independent triangular form: every profile's weight matrix shares it
    for shape, W in kernel.groups:
        _, upper, _, _ = blocks(W)
        if np.max(np.abs(upper), initial=0.0) > 1e-8 * max(np.abs(W).max(), 1.0):
            raise DegeneracyError("kernel is not triangularizable in a time-independent basis")

    A_int, _, B_int, C_int = blocks(Phi / rho)
    K_T = []
    for T in T_seq:
        c_T = 1.0 - kappa * T ** (-alpha)
        K_T.append(T**alpha * (np.eye(n_c) - c_T * A_int))
    K_T = np.array(K_T)
    K = _richardson(T_seq, K_T, alpha)
    if np.max(np.abs(K_T[-1] - K_T[-2])) > 1e-6 * max(1.0, np.abs(K).max()):
        raise DegeneracyError(
            "T^a (I - int A^T) does not converge: the critical block is not a multiple of the identity "
            f"(eigenvalues {np.round(np.linalg.eigvals(A_int), 6)})"
        )
    condK = np.linalg.cond(K)
    if not np.isfinite(condK) or condK > 1e12:
        raise DegeneracyError(f"K is singular (condition number {condK:.3g})")

    # heavy-tail limit alpha x^a int_x^inf A
    def tail(x):
        out = np.zeros((n_c, n_c))
        for shape, W in kernel.groups:
            a11, _, _, _ = blocks(W / rho)
            out += a11 * _profile_tail(shape, x)
        return alpha * x**alpha * out

    M_x = np.array([tail(x) for x in T_seq])
    M = _richardson(T_seq, M_x, 1.0)
    condM = np.linalg.cond(M) if np.any(M) else np.inf
    if not np.isfinite(condM) or condM > 1e12:
        raise DegeneracyError(
            f"M is singular or divergent (condition number {condM:.3g}); the kernel tail must decay like x^-(1+alpha)"
        )

    O11, O12 = O[:n_c, :n_c], O[:n_c, n_c:]
    O21, O22 = O[n_c:, :n_c], O[n_c:, n_c:]
    if n_c < d:
        G = np.linalg.solve(np.eye(d - n_c) - C_int, B_int)
        Theta1 = (O11 + O12 @ G) @ np.linalg.inv(K)
        Theta2 = (O21 + O22 @ G) @ np.linalg.inv(K)
    else:
        Theta1 = O11 @ np.linalg.inv(K)
        Theta2 = np.zeros((0, n_c))
    bd = np.zeros((d, d))
    bd[:n_c, :n_c] = O_inv[:n_c, :n_c]
    bd[n_c:, n_c:] = O_inv[n_c:, n_c:]
    theta0 = (bd @ mu)[:n_c]
    Lambda = alpha / gamma_fn(1 - alpha) * K @ np.linalg.inv(M)

    # Delta from psi masses of the stable members of the family
    deltas = []
    for T in T_seq:
        c_T = 1.0 - kappa * T ** (-alpha)
        psi = psi_integral(Phi * (c_T / rho))
        plus, minus = psi[0::2, 0::2], psi[1::2, 0::2]
        deltas.append((plus - minus).T)
    deltas = np.array(deltas)
    Delta = _richardson(T_seq, deltas, alpha)
    spread = np.max(np.abs(deltas[-1] - deltas[-2]))
    converged = bool(spread <= 1e-6 * max(1.0, np.abs(Delta).max()) or np.max(np.abs(deltas[-1] - Delta)) <= 1e-3 * max(1.0, np.abs(Delta).max()))
    if not converged:
        warnings.warn("Delta does not settle on the supplied T_sequence; reporting the extrapolated value", LimitNotConvergedWarning, stacklevel=2)

    return GeneralLimitMatrices(
        O=O, O_inv=O_inv, n_c=int(n_c), K=K, M=M, Theta1=Theta1, Theta2=Theta2, theta0=theta0,
        Lambda=Lambda, Delta=Delta, Q=Q, mu=mu, alpha=float(alpha), A_int=A_int, B_int=B_int,
        C_int=C_int, delta_converged=converged,
    )


def _profile_tail(shape, x: float) -> float:
    """``int_x^inf profile``."""
    return profile_mass(shape) - float(_cum(shape, x))


def _cum(shape, x):
    from .kernels import profile_cumulative

    return profile_cumulative(shape, x)


@dataclass(frozen=True)
class GeneralLimitPath:
    t: np.ndarray
    Vtilde: np.ndarray
    V: np.ndarray
    drivers: np.ndarray
    sigma: np.ndarray
    clamp_rate: float


def simulate_general_vtilde(mats: GeneralLimitMatrices, horizon: float, steps: int, seed, n_paths: int | None = None):
    """Euler scheme for the ``V~`` Volterra system and the limit surface.

    ``V = (Theta1; Theta2) V~`` and
    ``sigma_t = (I + Delta) Q^T (int diag(sqrt V) dB + mu t)``.
    """
    if steps < 10:
        raise DomainError("steps must be >= 10")
    P = 1 if n_paths is None else int(n_paths)
    d, n_c = mats.dim, mats.n_c
    rng = np.random.default_rng(seed)
    h = horizon / steps
    dB = rng.standard_normal((P, steps, d)) * np.sqrt(h)
    Theta = mats.Theta()
    noise = mats.Lambda @ mats.noise_matrix()  # (n_c, d)

    def vol(vt):
        v = vt @ Theta.T  # (P, d)
        clamped = float(np.mean(np.any(v < 0, axis=1)))
        s = np.sqrt(np.maximum(v, 0.0))
        return noise[None, :, :] * s[:, None, :], clamped

    Vt, clamps = _volterra_sqrt(mats.theta0, None, vol, mats.alpha, np.zeros(n_c), dB, h, drift_matrix=mats.Lambda)
    rate = float(clamps.mean())
    if rate > 0.5:
        warnings.warn(f"square-root argument clamped on {rate:.0%} of path steps", StabilityWarning, stacklevel=2)
    V = Vt @ Theta.T
    incr = np.sqrt(np.maximum(V[:, :-1], 0.0)) * dB
    drivers = np.zeros((P, steps + 1, d))
    drivers[:, 1:] = np.cumsum(incr, axis=1)
    t = np.linspace(0.0, horizon, steps + 1)
    total = drivers + t[None, :, None] * mats.mu[None, None, :]
    sigma = total @ mats.Q @ (np.eye(d // 2) + mats.Delta).T
    out = GeneralLimitPath(t, Vt, V, drivers, sigma, rate)
    if n_paths is None:
        return GeneralLimitPath(t, Vt[0], V[0], drivers[0], sigma[0], rate)
    return out
