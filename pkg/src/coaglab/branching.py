"""Arm measures, offspring laws and Galton-Watson formulas.

Everything here is finitely supported. Convolution powers are computed by
direct convolution in linear space; a running log-scale factor keeps values
representable when the raw numbers would underflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROOT_TOL = 1e-12
# rescale the working vector once its peak drops below this
_RESCALE_BELOW = 1e-200


class DegenerateMeasureError(ValueError):
    pass


class NotGellingError(ValueError):
    pass


def _fsum_desc(values) -> float:
    # largest index first; fsum is exact anyway, ordering kept for reproducibility
    return math.fsum(np.asarray(values, dtype=float)[::-1])


@dataclass(frozen=True)
class ArmMeasure:
    """Initial concentration of atoms by number of arms.

    ``weights[a]`` is the concentration of atoms carrying ``a`` arms; index 0
    is always zero so the array can be indexed by arm count directly.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 2:
            raise DegenerateMeasureError("degenerate arm measure")
        if w[0] != 0.0:
            raise ValueError("atoms must carry at least one arm (weights[0] != 0)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("arm weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise DegenerateMeasureError("degenerate arm measure")
        # trim trailing zeros so a_max is the true support bound
        last = int(np.flatnonzero(w)[-1])
        w = w[: last + 1]
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_dict(cls, weights: dict[int, float]) -> "ArmMeasure":
        if not weights:
            raise DegenerateMeasureError("degenerate arm measure")
        if min(weights) < 1:
            raise ValueError("arm counts must be >= 1")
        w = np.zeros(max(weights) + 1)
        for a, x in weights.items():
            w[a] += x
        return cls(w)

    @classmethod
    def point(cls, a: int, weight: float = 1.0) -> "ArmMeasure":
        return cls.from_dict({a: weight})

    @property
    def a_max(self) -> int:
        return self.weights.size - 1

    def as_dict(self) -> dict[int, float]:
        return {int(a): float(self.weights[a]) for a in np.flatnonzero(self.weights)}

    def moment(self, j: int) -> float:
        return moment(self, j)

    @property
    def total(self) -> float:
        return moment(self, 0)

    def normalized(self) -> "ArmMeasure":
        return ArmMeasure(self.weights / self.total)

    @property
    def gels(self) -> bool:
        """True when A2 > 2 A1, i.e. the system undergoes gelation."""
        return moment(self, 2) > 2.0 * moment(self, 1)

    def __eq__(self, other):
        if not isinstance(other, ArmMeasure):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())


def moment(mu: ArmMeasure, j: int) -> float:
    """A_j = sum_a a**j mu(a)."""
    if j < 0:
        raise ValueError("moment order must be nonnegative")
    a = np.arange(mu.weights.size, dtype=float)
    return _fsum_desc(a**j * mu.weights)


@dataclass(frozen=True)
class OffspringLaw:
    pmf: np.ndarray

    def __post_init__(self):
        p = np.array(self.pmf, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("empty offspring law")
        if np.any(p < 0):
            raise ValueError("negative probability")
        if abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"offspring law sums to {math.fsum(p)!r}, not 1")
        nz = np.flatnonzero(p)
        p = p[: int(nz[-1]) + 1]
        p.setflags(write=False)
        object.__setattr__(self, "pmf", p)

    @classmethod
    def from_dict(cls, pmf: dict[int, float]) -> "OffspringLaw":
        p = np.zeros(max(pmf) + 1)
        for j, x in pmf.items():
            p[j] += x
        return cls(p)

    @property
    def j_max(self) -> int:
        return self.pmf.size - 1

    @property
    def mean(self) -> float:
        return _fsum_desc(np.arange(self.pmf.size) * self.pmf)

    def __call__(self, j: int) -> float:
        return float(self.pmf[j]) if 0 <= j < self.pmf.size else 0.0


@dataclass(eq=False)
class Pmf:
    """Finite pmf on ``offset, offset+1, ...``.

    The true probability at ``offset + i`` is ``values[i] * exp(log_scale)``.
    """

    values: np.ndarray
    offset: int = 0
    log_scale: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __eq__(self, other):
        if not isinstance(other, Pmf):
            return NotImplemented
        return (self.offset == other.offset and self.log_scale == other.log_scale
                and np.array_equal(self.values, other.values))

    def __call__(self, k: int) -> float:
        i = k - self.offset
        if i < 0 or i >= self.values.size:
            return 0.0
        return float(self.values[i]) * math.exp(self.log_scale)

    def log(self, k: int) -> float:
        i = k - self.offset
        if i < 0 or i >= self.values.size or self.values[i] <= 0.0:
            return -math.inf
        return math.log(self.values[i]) + self.log_scale

    def probabilities(self) -> np.ndarray:
        return self.values * math.exp(self.log_scale)

    def total(self) -> float:
        return math.fsum(self.values) * math.exp(self.log_scale)

    @property
    def support(self) -> np.ndarray:
        return self.offset + np.arange(self.values.size)

    def as_dict(self, cutoff: float = 0.0) -> dict[int, float]:
        p = self.probabilities()
        return {int(self.offset + i): float(p[i]) for i in range(p.size) if p[i] > cutoff}


def offspring_from_arms(mu: ArmMeasure) -> OffspringLaw:
    """nu(j) = (j+1) mu(j+1) / A1: size-biased arm law shifted by one."""
    a1 = moment(mu, 1)
    if not a1 > 0:
        raise DegenerateMeasureError("degenerate arm measure")
    a = np.arange(mu.weights.size, dtype=float)
    biased = (a * mu.weights)[1:] / a1
    # absorb the last-ulp rounding so the law passes the 1e-12 check for any support
    biased /= math.fsum(biased)
    return OffspringLaw(biased)


def pgf(nu: OffspringLaw, x: float) -> float:
    return float(np.polynomial.polynomial.polyval(x, nu.pmf))


def pgf_prime(nu: OffspringLaw, x: float) -> float:
    j = np.arange(1, nu.pmf.size)
    if j.size == 0:
        return 0.0
    return float(np.polynomial.polynomial.polyval(x, j * nu.pmf[1:]))


def _renormalize(v: np.ndarray, log_scale: float) -> tuple[np.ndarray, float]:
    peak = v.max() if v.size else 0.0
    if 0.0 < peak < _RESCALE_BELOW:
        v = v / peak
        log_scale += math.log(peak)
    return v, log_scale


def _conv(x: np.ndarray, y: np.ndarray, k_max: int) -> np.ndarray:
    out = np.convolve(x, y)[: k_max + 1]
    # convolution of nonnegative inputs cannot be negative; clip rounding noise
    np.maximum(out, 0.0, out=out)
    return out


def convolve_pmf(p: Pmf, q: Pmf, k_max: int | None = None) -> Pmf:
    """Convolution of two pmfs, optionally truncated at support point ``k_max``."""
    offset = p.offset + q.offset
    vals = np.convolve(p.values, q.values)
    if k_max is not None:
        vals = vals[: max(k_max - offset + 1, 0)]
    vals, ls = _renormalize(vals, p.log_scale + q.log_scale)
    return Pmf(vals, offset, ls)


def convolution_power(nu: OffspringLaw, m: int, k_max: int) -> Pmf:
    """nu^{*m} restricted to {0, ..., k_max}.

    Uses binary powering of direct truncated convolutions. Truncation is safe
    because the support starts at 0: entries above ``k_max`` never feed back
    into entries below it.
    """
    if m < 1:
        raise ValueError("convolution power needs m >= 1")
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")
    base = np.array(nu.pmf[: k_max + 1], dtype=float)
    base_ls = 0.0
    acc = None
    acc_ls = 0.0
    e = m
    while True:
        if e & 1:
            if acc is None:
                acc, acc_ls = base.copy(), base_ls
            else:
                acc, acc_ls = _renormalize(_conv(acc, base, k_max), acc_ls + base_ls)
        e >>= 1
        if not e:
            break
        base, base_ls = _renormalize(_conv(base, base, k_max), 2 * base_ls)
    out = np.zeros(k_max + 1)
    out[: acc.size] = acc
    return Pmf(out, 0, acc_ls)


def iter_convolution_powers(nu: OffspringLaw, m_max: int, k_max: int):
    """Yield (m, nu^{*m} truncated at k_max) for m = 1..m_max by repeated convolution."""
    cur = np.zeros(k_max + 1)
    n0 = min(nu.pmf.size, k_max + 1)
    cur[:n0] = nu.pmf[:n0]
    ls = 0.0
    kernel = nu.pmf[: k_max + 1]
    for m in range(1, m_max + 1):
        if m > 1:
            cur, ls = _renormalize(_conv(cur, kernel, k_max), ls)
        yield m, Pmf(cur, 0, ls)


def log_dwass_terms(nu: OffspringLaw, m_max: int) -> np.ndarray:
    """log nu^{*m}(m-2) for m = 0..m_max (entries m < 2 are -inf)."""
    out = np.full(m_max + 1, -math.inf)
    if m_max < 2:
        return out
    for m, p in iter_convolution_powers(nu, m_max, m_max - 2):
        if m >= 2:
            out[m] = p.log(m - 2)
    return out


def dwass_two_ancestors(nu: OffspringLaw, m: int) -> float:
    """P(total progeny = m) for a Galton-Watson forest with two ancestors."""
    if m < 2:
        raise ValueError("two ancestors give total size >= 2")
    return 2.0 / m * convolution_power(nu, m, m - 2)(m - 2)


def gw_sample_total_sizes(nu: OffspringLaw, ancestors: int, rng: np.random.Generator,
                          cap: int, size: int) -> np.ndarray:
    """Vectorised Galton-Watson total progeny; -1 marks runs that passed ``cap``.

    All ``size`` forests are advanced one generation at a time; the number of
    children of Z individuals is drawn as a multinomial count over ``nu``.
    """
    if ancestors < 1 or cap < ancestors:
        raise ValueError("need ancestors >= 1 and cap >= ancestors")
    total = np.full(size, ancestors, dtype=np.int64)
    alive = np.full(size, ancestors, dtype=np.int64)
    exceeded = np.zeros(size, dtype=bool)
    j = np.arange(nu.pmf.size)
    active = np.flatnonzero(alive > 0)
    while active.size:
        counts = rng.multinomial(alive[active], nu.pmf)
        children = counts @ j
        alive[active] = children
        total[active] += children
        over = total[active] > cap
        if over.any():
            exceeded[active[over]] = True
            alive[active[over]] = 0
        active = active[alive[active] > 0]
    total[exceeded] = -1
    return total


def gw_sample_total_size(nu: OffspringLaw, ancestors: int, rng: np.random.Generator,
                         cap: int) -> int | None:
    """Total progeny (ancestors included) of one forest, or None if it passed ``cap``."""
    if ancestors < 1 or cap < ancestors:
        raise ValueError("need ancestors >= 1 and cap >= ancestors")
    total = ancestors
    queue = ancestors
    while queue:
        k = int(rng.choice(nu.pmf.size, p=nu.pmf))
        queue += k - 1
        total += k
        if total > cap:
            return None
    return total


def log_borel_pmf(t: float, m: int) -> float:
    if not 0.0 < t <= 1.0:
        raise ValueError("Borel parameter must lie in (0, 1]")
    if m < 1:
        raise ValueError("Borel support starts at 1")
    return -t * m + (m - 1) * math.log(t * m) - math.lgamma(m + 1)


def borel_pmf(t: float, m: int) -> float:
    """e^{-tm} (tm)^{m-1} / m!"""
    return math.exp(log_borel_pmf(t, m))


def bisect(f, lo: float, hi: float, tol: float = ROOT_TOL) -> float:
    """Bracketing bisection; requires f(lo) and f(hi) of opposite sign.

    Iterates until the bracket is narrower than ``tol`` and then keeps going
    while the midpoint is still representable, so residuals sit at rounding
    level rather than at ``tol``.
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ValueError("root not bracketed")
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
        if hi - lo < tol * 1e-3:
            break
    return lo if abs(flo) <= abs(fhi) else hi


def theta(t: float) -> float:
    """Fraction of mass left in finite clusters for the mono-disperse multiplicative kernel."""
    if not t > 0:
        raise ValueError("theta needs t > 0")
    if t <= 1.0:
        return 1.0

    def f(x):
        return math.exp(t * (x - 1.0)) - x

    # f is convex with minimum at 1 - ln(t)/t, where it is negative
    return bisect(f, 0.0, 1.0 - math.log(t) / t)


def eta_beta(nu: OffspringLaw) -> tuple[float, float]:
    """Root eta of x g'(x) = g(x) in (0, 1) and beta = 1/g'(eta)."""
    if nu.mean <= 1.0:
        raise NotGellingError("fixed point only defined in gelling regime")
    if nu(0) <= 0.0:
        raise ValueError("no root in (0,1): nu(0) = 0")
    coef = (np.arange(nu.pmf.size) - 1.0) * nu.pmf

    def h(x):
        # x g'(x) - g(x) = sum (i-1) nu(i) x^i, increasing on [0, 1]
        return float(np.polynomial.polynomial.polyval(x, coef))

    eta = bisect(h, 0.0, 1.0)
    beta = 1.0 / pgf_prime(nu, eta)
    alt = eta / pgf(nu, eta)
    if abs(beta - alt) > 1e-9 or not beta > 1.0:
        raise ArithmeticError(f"inconsistent fixed point: beta={beta!r}, eta/g(eta)={alt!r}")
    return eta, beta


def criticality(mu: ArmMeasure) -> float:
    """sum_i i(i-2) mu(i) with mu normalised; > 0 means a giant cluster forms."""
    a = np.arange(mu.weights.size, dtype=float)
    return _fsum_desc(a * (a - 2.0) * mu.weights) / mu.total


def molloy_reed_subcritical(mu: ArmMeasure) -> bool:
    """Equivalent predicate A2 <= 2 A1."""
    return not mu.gels
