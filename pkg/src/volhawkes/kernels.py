"""Parametric Hawkes kernels and structured kernel matrices.

Every kernel function is stored as a list of ``(weight, shape)`` terms, where a
shape is a normalised time profile:

* ``("power_law", gamma, scale)`` -> ``(1/scale) * (1 + t/scale) ** (-1 - gamma)``
* ``("exponential", beta)``       -> ``exp(-beta * t)``

With ``scale = 1`` a power-law term of weight ``alpha`` is ``alpha / (1+t)^(1+gamma)``
and its integral over ``[0, inf)`` is ``alpha / gamma``. The ``scale`` parameter
changes the time unit of the kernel without changing that mass, which is how a
kernel calibrated in days is used on a clock measured in years.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericalError, StructuralError

Shape = tuple

# ---------------------------------------------------------------------------
# shape profiles


def _check_shape(shape: Shape) -> None:
    kind = shape[0]
    if kind == "power_law":
        if shape[2] <= 0:
            raise DomainError(f"power-law scale must be positive, got {shape[2]}")
    elif kind == "exponential":
        if shape[1] <= 0:
            raise DomainError(f"exponential decay must be positive, got {shape[1]}")
    else:
        raise StructuralError(f"unknown kernel shape {kind!r}")


def profile(shape: Shape, t):
    """Normalised profile value at lag ``t`` (array-friendly, zero for t < 0)."""
    t = np.asarray(t, dtype=float)
    if shape[0] == "power_law":
        _, gamma, scale = shape
        out = (1.0 / scale) * np.power(1.0 + np.maximum(t, 0.0) / scale, -1.0 - gamma)
    else:
        out = np.exp(-shape[1] * np.maximum(t, 0.0))
    return np.where(t >= 0, out, 0.0)


def profile_mass(shape: Shape) -> float:
    if shape[0] == "power_law":
        gamma = shape[1]
        if gamma <= 0:
            raise DomainError(f"power-law kernel with gamma={gamma} is not integrable")
        return 1.0 / gamma
    return 1.0 / shape[1]


def profile_cumulative(shape: Shape, t):
    """Integral of the profile over ``[0, t]``."""
    t = np.maximum(np.asarray(t, dtype=float), 0.0)
    if shape[0] == "power_law":
        _, gamma, scale = shape
        if gamma == 0:
            return np.log1p(t / scale)
        return (1.0 - np.power(1.0 + t / scale, -gamma)) / gamma
    beta = shape[1]
    return -np.expm1(-beta * t) / beta


def profile_at_zero(shape: Shape) -> float:
    if shape[0] == "power_law":
        return 1.0 / shape[2]
    return 1.0


def sample_lags(shape: Shape, u, horizon):
    """Invert the profile's CDF restricted to ``[0, horizon]``; ``u`` in [0, 1)."""
    u = np.asarray(u, dtype=float)
    if shape[0] == "power_law":
        _, gamma, scale = shape
        tail = np.power(1.0 + horizon / scale, -gamma)
        return scale * (np.power(1.0 - u * (1.0 - tail), -1.0 / gamma) - 1.0)
    beta = shape[1]
    return -np.log1p(-u * (-np.expm1(-beta * horizon))) / beta


# ---------------------------------------------------------------------------
# kernel functions


class KernelFn:
    """A kernel function ``t -> sum_k w_k * profile_k(t)``.

    Subclasses only have to provide :meth:`terms`.
    """

    def terms(self) -> tuple:
        raise NotImplementedError

    def term_weights(self) -> dict:
        out: dict = {}
        for w, shape in self.terms():
            out[shape] = out.get(shape, 0.0) + w
        return out

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for w, shape in self.terms():
            total = total + w * profile(shape, t)
        return total

    def mass(self) -> float:
        return float(sum(w * profile_mass(shape) for w, shape in self.terms()))

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for w, shape in self.terms():
            total = total + w * profile_cumulative(shape, t)
        return total

    def at_zero(self) -> float:
        return float(sum(w * profile_at_zero(shape) for w, shape in self.terms()))

    def scaled(self, factor: float) -> "KernelFn":
        return KernelSum(tuple((w * factor, s) for w, s in self.terms()))

    def is_zero(self) -> bool:
        return all(w == 0 for w in self.term_weights().values())

    def is_nonnegative(self) -> bool:
        # exact when all terms share one shape; otherwise checked on a lag grid
        weights = self.term_weights()
        if all(w >= 0 for w in weights.values()):
            return True
        if len(weights) == 1:
            return False
        lags = np.concatenate([[0.0], np.logspace(-6, 6, 241)])
        return bool(np.all(self(lags) >= -1e-14))

    def is_monotone(self) -> bool:
        """True when every term is non-negative, so the sum is non-increasing."""
        return all(w >= 0 for w in self.term_weights().values())

    def same_shape(self, other: "KernelFn") -> bool:
        a = {s for s, w in self.term_weights().items() if w != 0}
        b = {s for s, w in other.term_weights().items() if w != 0}
        return a == b or not a or not b

    def __add__(self, other: "KernelFn") -> "KernelFn":
        return KernelSum(self.terms() + other.terms())


@dataclass(frozen=True)
class PowerLaw(KernelFn):
    """``alpha / scale * (1 + t/scale) ** -(1 + gamma)``; mass ``alpha / gamma``."""

    alpha: float
    gamma: float
    scale: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError(f"power-law alpha must be >= 0, got {self.alpha}")
        if self.scale <= 0:
            raise DomainError(f"power-law scale must be > 0, got {self.scale}")

    def terms(self):
        return ((float(self.alpha), ("power_law", float(self.gamma), float(self.scale))),)

    def scaled(self, factor):
        if factor >= 0:
            return PowerLaw(self.alpha * factor, self.gamma, self.scale)
        return super().scaled(factor)


@dataclass(frozen=True)
class Exponential(KernelFn):
    """``alpha * exp(-beta t)``; mass ``alpha / beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError(f"exponential alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise DomainError(f"exponential beta must be > 0, got {self.beta}")

    def terms(self):
        return ((float(self.alpha), ("exponential", float(self.beta))),)

    def scaled(self, factor):
        if factor >= 0:
            return Exponential(self.alpha * factor, self.beta)
        return super().scaled(factor)


@dataclass(frozen=True)
class Zero(KernelFn):
    def terms(self):
        return ()

    def scaled(self, factor):
        return self


@dataclass(frozen=True)
class KernelSum(KernelFn):
    """Signed combination of profiles, used by the semi-separable assembly."""

    parts: tuple = ()

    def __post_init__(self):
        merged: dict = {}
        for w, shape in self.parts:
            _check_shape(shape)
            merged[shape] = merged.get(shape, 0.0) + float(w)
        object.__setattr__(self, "parts", tuple((w, s) for s, w in merged.items()))

    def terms(self):
        return self.parts


ZERO = Zero()


def kernels_close(a: KernelFn, b: KernelFn, rtol: float = 1e-9, atol: float = 1e-300) -> bool:
    """Term-by-term equality of two kernel functions."""
    wa, wb = a.term_weights(), b.term_weights()
    for shape in set(wa) | set(wb):
        x, y = wa.get(shape, 0.0), wb.get(shape, 0.0)
        if abs(x - y) > max(rtol * max(abs(x), abs(y)), atol):
            return False
    return True


def combine(coeffs: Sequence[float], fns: Sequence[KernelFn]) -> KernelFn:
    """Linear combination ``sum c_i f_i`` as a single kernel function."""
    parts = []
    for c, f in zip(coeffs, fns):
        parts.extend((c * w, s) for w, s in f.terms())
    return KernelSum(tuple(parts))


# ---------------------------------------------------------------------------
# kernel matrix


@dataclass(frozen=True)
class KernelMatrix:
    """Square matrix of kernel functions; entry ``(i, j)`` is the effect of
    component ``j`` events on the intensity of component ``i``."""

    entries: tuple
    labels: tuple | None = None

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.entries)
        d = len(rows)
        if any(len(r) != d for r in rows):
            raise StructuralError("kernel matrix must be square")
        for r in rows:
            for f in r:
                if not isinstance(f, KernelFn):
                    raise StructuralError(f"kernel entries must be KernelFn, got {type(f).__name__}")
        object.__setattr__(self, "entries", rows)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != d:
                raise StructuralError("labels must match the kernel dimension")
            object.__setattr__(self, "labels", labels)

    @classmethod
    def zeros(cls, d: int, labels=None) -> "KernelMatrix":
        return cls(tuple((ZERO,) * d for _ in range(d)), labels)

    @classmethod
    def power_law(cls, alpha, gamma, scale=1.0, labels=None) -> "KernelMatrix":
        alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), alpha.shape)
        scale = np.broadcast_to(np.asarray(scale, dtype=float), alpha.shape)
        return cls(
            tuple(
                tuple(PowerLaw(alpha[i, j], gamma[i, j], scale[i, j]) for j in range(alpha.shape[1]))
                for i in range(alpha.shape[0])
            ),
            labels,
        )

    @classmethod
    def exponential(cls, alpha, beta, labels=None) -> "KernelMatrix":
        alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        beta = np.broadcast_to(np.asarray(beta, dtype=float), alpha.shape)
        return cls(
            tuple(
                tuple(Exponential(alpha[i, j], beta[i, j]) for j in range(alpha.shape[1]))
                for i in range(alpha.shape[0])
            ),
            labels,
        )

    @property
    def dim(self) -> int:
        return len(self.entries)

    def __getitem__(self, ij) -> KernelFn:
        i, j = ij
        return self.entries[i][j]

    def row(self, i: int) -> tuple:
        return self.entries[i]

    def with_row(self, i: int, row: Iterable[KernelFn]) -> "KernelMatrix":
        rows = list(self.entries)
        rows[i] = tuple(row)
        return KernelMatrix(tuple(rows), self.labels)

    def with_entry(self, i: int, j: int, fn: KernelFn) -> "KernelMatrix":
        row = list(self.entries[i])
        old = row[j]
        row[j] = fn
        out = self.with_row(i, row)
        if "groups" in self.__dict__:
            # patch the cached weights instead of rescanning every entry
            acc = {shape: w.copy() for shape, w in self.groups}
            for w, shape in old.terms():
                acc[shape][i, j] -= w
            for w, shape in fn.terms():
                if w == 0:
                    continue
                acc.setdefault(shape, np.zeros((self.dim, self.dim)))[i, j] += w
            out.__dict__["groups"] = tuple((shape, w) for shape, w in acc.items() if np.any(w))
        return out

    def relabel(self, labels) -> "KernelMatrix":
        return KernelMatrix(self.entries, labels)

    def integrated(self) -> np.ndarray:
        """Entrywise integral over ``[0, inf)`` (closed form per family)."""
        return np.array([[f.mass() for f in r] for r in self.entries], dtype=float).reshape(self.dim, self.dim)

    def evaluate(self, t: float) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for shape, w in self.groups:
            out += w * float(profile(shape, t))
        return out

    def cumulative(self, t: float) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for shape, w in self.groups:
            out += w * float(profile_cumulative(shape, t))
        return out

    def at_zero(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for shape, w in self.groups:
            out += w * profile_at_zero(shape)
        return out

    @cached_property
    def groups(self) -> tuple:
        """``((shape, W), ...)`` with ``phi(t) = sum W * profile(shape, t)``."""
        acc: dict = {}
        d = self.dim
        for i, r in enumerate(self.entries):
            for j, f in enumerate(r):
                for w, shape in f.terms():
                    if w == 0:
                        continue
                    if shape not in acc:
                        acc[shape] = np.zeros((d, d))
                    acc[shape][i, j] += w
        return tuple(acc.items())

    def is_zero(self) -> bool:
        return not self.groups

    def is_nonnegative(self) -> bool:
        return all(f.is_nonnegative() for r in self.entries for f in r)

    def is_monotone(self) -> bool:
        return all(f.is_monotone() for r in self.entries for f in r)

    def scaled(self, factor: float) -> "KernelMatrix":
        return KernelMatrix(tuple(tuple(f.scaled(factor) for f in r) for r in self.entries), self.labels)


# ---------------------------------------------------------------------------
# structured assemblies


def _maturities(maturities) -> np.ndarray:
    taus = np.asarray(maturities, dtype=float).ravel()
    if taus.size == 0 or np.any(taus <= 0):
        raise DomainError("maturities must be strictly positive")
    if np.any(np.diff(taus) <= 0):
        raise DomainError("maturities must be sorted ascending")
    return taus


@dataclass(frozen=True)
class SeparableSpec:
    z: np.ndarray
    varphi: KernelFn
    maturities: tuple

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        if np.any(z < 0):
            raise DomainError("separable strike weights must be non-negative")
        if not np.any(z != 0):
            raise DomainError("separable strike weights are all zero")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "maturities", tuple(_maturities(self.maturities)))

    def at_criticality(self) -> "SeparableSpec":
        """Copy with ``varphi`` rescaled to the critical mass."""
        return SeparableSpec(self.z, self.varphi.scaled(criticality_norm(self) / self.varphi.mass()), self.maturities)


@dataclass(frozen=True)
class SemiSeparableSpec:
    """Rank-``r`` kernel: ``factors`` is a sequence of ``(z_i, varphi_i)``."""

    factors: tuple
    maturities: tuple
    tol: float = 1e-10

    def __post_init__(self):
        factors = tuple((np.asarray(z, dtype=float).ravel(), f) for z, f in self.factors)
        if not factors:
            raise StructuralError("semi-separable kernel needs at least one factor")
        n = factors[0][0].size
        if any(z.size != n for z, _ in factors):
            raise StructuralError("factor strike vectors must share one length")
        for a in range(len(factors)):
            for b in range(a + 1, len(factors)):
                dot = float(factors[a][0] @ factors[b][0])
                if abs(dot) > self.tol:
                    raise DomainError(f"factors {a} and {b} are not orthogonal (dot={dot:.3g})")
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "maturities", tuple(_maturities(self.maturities)))

    @property
    def rank(self) -> int:
        return len(self.factors)


def _maturity_weights(taus: np.ndarray) -> np.ndarray:
    # row factor sqrt(tau_1 / tau_m), one per target maturity block
    return np.sqrt(taus[0] / taus)


def _option_labels(n_strikes: int, taus) -> tuple:
    return tuple(f"k{k}@{tau:.6g}" for tau in taus for k in range(n_strikes))


def assemble_separable(spec: SeparableSpec) -> KernelMatrix:
    """Rank-one strike/maturity kernel.

    Entry ``((tau_m, k), (tau_n, k'))`` is ``sqrt(tau_1/tau_m) z(k) z(k') varphi``;
    the row scaling is the equal-coefficient calendar relation, so every maturity
    row is the first-maturity row shrunk by ``sqrt(tau_1/tau_m)``.
    """
    taus = np.asarray(spec.maturities)
    rowf = _maturity_weights(taus)
    z = spec.z
    K, M = z.size, taus.size
    rows = []
    for m in range(M):
        for k in range(K):
            rows.append(tuple(spec.varphi.scaled(rowf[m] * z[k] * z[kk]) for _ in range(M) for kk in range(K)))
    return KernelMatrix(tuple(rows), _option_labels(K, taus))


def separable_eigenpair(spec: SeparableSpec) -> tuple[float, np.ndarray]:
    """Closed-form non-zero eigenpair of the time-integrated separable kernel.

    The eigenvalue is ``||varphi|| * sqrt(tau_1) * ||z||^2 * sum_m 1/sqrt(tau_m)``
    and the eigenvector is ``(z/sqrt(tau_1), ..., z/sqrt(tau_M))`` normalised.
    """
    taus = np.asarray(spec.maturities)
    inv = 1.0 / np.sqrt(taus)
    z2 = float(spec.z @ spec.z)
    value = spec.varphi.mass() * np.sqrt(taus[0]) * z2 * inv.sum()
    v = np.kron(inv, spec.z)
    return float(value), v / np.linalg.norm(v)


def criticality_norm(spec: SeparableSpec | SemiSeparableSpec, factor: int = 0) -> float:
    """Mass of the time profile that puts the (factor's) eigenvalue at one."""
    taus = np.asarray(spec.maturities)
    z = spec.z if isinstance(spec, SeparableSpec) else spec.factors[factor][0]
    z2 = float(z @ z)
    if z2 == 0:
        raise DomainError("zero strike vector has no critical normalisation")
    return 1.0 / (z2 * float(np.sum(np.sqrt(taus[0] / taus))))


def assemble_semi_separable(spec: SemiSeparableSpec) -> KernelMatrix:
    """Sum of ``r`` separable blocks built on orthogonal strike vectors."""
    taus = np.asarray(spec.maturities)
    rowf = _maturity_weights(taus)
    K, M = spec.factors[0][0].size, taus.size
    rows = []
    for m in range(M):
        for k in range(K):
            row = []
            for _ in range(M):
                for kk in range(K):
                    coeffs = [rowf[m] * z[k] * z[kk] for z, _ in spec.factors]
                    row.append(combine(coeffs, [f for _, f in spec.factors]))
            rows.append(tuple(row))
    return KernelMatrix(tuple(rows), _option_labels(K, taus))


def semi_separable_eigenpairs(spec: SemiSeparableSpec) -> list[tuple[float, np.ndarray]]:
    taus = np.asarray(spec.maturities)
    out = []
    for z, f in spec.factors:
        out.append(separable_eigenpair(SeparableSpec(np.abs(z), f, taus)))
        out[-1] = (out[-1][0], np.kron(1.0 / np.sqrt(taus), z) / np.linalg.norm(np.kron(1.0 / np.sqrt(taus), z)))
    return out


def factor_shapes(strikes, nu: float, c1: float, c2: float, c3: float, c4: float):
    """Level, skew and butterfly strike profiles on a moneyness grid."""
    k = np.asarray(strikes, dtype=float)
    z1 = nu * k
    z2 = c1 * (1.0 / (1.0 + np.exp(-c2 * (k - 1.0))) - 0.5)
    z3 = c3 * (k - 1.0) ** 2 - c4
    return z1, z2, z3


def sign_expand(kernel: KernelMatrix, share: float = 0.5) -> KernelMatrix:
    """Lift an option-level kernel to the signed ``(+, -)`` components.

    Each of the four sign pairs receives ``share * phi``; with the default one
    half, total activity (``N+ + N-``) is excited exactly by ``phi`` so both
    kernels have the same spectral radius.
    """
    d = kernel.dim
    rows = []
    for i in range(d):
        row = []
        for j in range(d):
            f = kernel[i, j].scaled(share)
            row.extend((f, f))
        rows.append(tuple(row))
        rows.append(tuple(row))
    labels = None
    if kernel.labels is not None:
        labels = tuple(f"{lab}{s}" for lab in kernel.labels for s in "+-")
    return KernelMatrix(tuple(rows), labels)


# ---------------------------------------------------------------------------
# spectral diagnostics


def spectral_radius(m, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest eigenvalue modulus by power iteration on the norm growth ratio."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise StructuralError("spectral_radius needs a square matrix")
    if not np.any(a):
        return 0.0
    n = a.shape[0]
    # non-negative matrices: a small shift breaks periodic (imprimitive) cycles
    shift = 0.0
    if np.all(a >= 0):
        shift = 0.5 * float(np.max(np.abs(a).sum(axis=1))) / n
    b = a + shift * np.eye(n)
    x = np.ones(n) / np.sqrt(n) + 1e-3 * np.arange(n) / n
    x /= np.linalg.norm(x)
    prev = np.inf
    for _ in range(max_iter):
        y = b @ x
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        # two-step growth is stable when a +/- pair shares the top modulus
        y2 = b @ (y / ny)
        n2 = np.linalg.norm(y2)
        if n2 == 0:
            return 0.0
        est = np.sqrt(ny * n2)
        x = y2 / n2
        if abs(est - prev) <= tol * est:
            return float(est - shift)
        prev = est
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")
