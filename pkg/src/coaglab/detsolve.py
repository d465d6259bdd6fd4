"""Deterministic coagulation: closed forms, gelation times and truncated ODE integrators.

Fields are stored indexed by value: a mono field ``c`` has ``c[m]`` for
m = 0..M_max with ``c[0] == 0``; a limited field has ``c[a, m]`` with the
m = 0 column identically zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.signal import fftconvolve

from .branching import (
    ArmMeasure,
    NotGellingError,
    Pmf,
    eta_beta,
    iter_convolution_powers,
    log_dwass_terms,
    moment,
    offspring_from_arms,
    convolution_power,
)

NEG_TOL = 1e-10


class InstabilityError(ArithmeticError):
    pass


class GelationError(ValueError):
    """Raised when a pre-gelation formula or integrator is asked for t >= T."""


# ---------------------------------------------------------------- multiplicative kernel


def log_mcleod(t: float, m: int) -> float:
    if not 0.0 <= t < 1.0:
        raise GelationError("use kokholm past gelation")
    if m < 1:
        raise ValueError("mass must be >= 1")
    if t == 0.0:
        return 0.0 if m == 1 else -math.inf
    return (m - 1) * math.log(t) + (m - 2) * math.log(m) - m * t - math.lgamma(m + 1)


def mcleod(t: float, m: int) -> float:
    """Mono-disperse multiplicative-kernel solution before gelation."""
    return math.exp(log_mcleod(t, m))


def kokholm(t: float, m: int) -> float:
    """Mono-disperse post-gelation solution, t >= 1."""
    if t < 1.0:
        raise GelationError("kokholm solution applies for t >= 1")
    if m < 1:
        raise ValueError("mass must be >= 1")
    return math.exp((m - 2) * math.log(m) - m - math.lgamma(m + 1)) / t


def mono_field(weights: dict[int, float], M_max: int) -> np.ndarray:
    c = np.zeros(M_max + 1)
    for m, w in weights.items():
        if not 1 <= m <= M_max:
            raise ValueError(f"mass {m} outside 1..{M_max}")
        if w < 0:
            raise ValueError("negative concentration")
        c[m] = w
    return c


def tgel_multiplicative(c0: np.ndarray) -> float:
    """1 / sum m^2 c0(m) for a mono field indexed by mass."""
    c0 = np.asarray(c0, dtype=float)
    m = np.arange(c0.size, dtype=float)
    second = math.fsum((m**2 * c0)[::-1])
    if not second > 0:
        raise ValueError("zero initial field")
    return 1.0 / second


def tgel_limited(mu: ArmMeasure) -> float:
    """inf when A2 <= 2 A1, else 1/(A2 - 2 A1)."""
    a1, a2 = moment(mu, 1), moment(mu, 2)
    if a2 <= 2.0 * a1:
        return math.inf
    return 1.0 / (a2 - 2.0 * a1)


# ---------------------------------------------------------------- limited aggregations


def _log_limited(a1: float, t: float, a: int, m: int, log_conv: float) -> float:
    if m == 1:
        log_t = 0.0
    elif t == 0.0:
        return -math.inf
    else:
        log_t = (m - 1) * math.log(t)
    return (math.lgamma(a + m - 1) - math.lgamma(a + 1) - math.lgamma(m + 1)
            + m * math.log(a1) + log_t - (a + m - 1) * math.log1p(a1 * t) + log_conv)


def _check_pre_gel(mu: ArmMeasure, t: float):
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t >= tgel_limited(mu):
        raise GelationError("closed form valid pre-gelation only")


def limited_closed_form(mu: ArmMeasure, t: float, a: int, m: int) -> float:
    """Explicit pre-gelation concentration of particles with a >= 1 arms and size m."""
    _check_pre_gel(mu, t)
    if a < 1 or m < 1:
        raise ValueError("need a, m >= 1 (use limited_closed_form_zero_arms for a = 0)")
    nu = offspring_from_arms(mu)
    k = a + m - 2
    log_conv = convolution_power(nu, m, k).log(k)
    return math.exp(_log_limited(moment(mu, 1), t, a, m, log_conv))


def _log_zero_arms(a1: float, t: float, m: int, log_conv: float) -> float:
    return (math.log(a1) - math.log(m * (m - 1))
            + (m - 1) * (math.log(a1 * t) - math.log1p(a1 * t)) + log_conv)


def limited_closed_form_zero_arms(mu: ArmMeasure, t: float, m: int) -> float:
    """Pre-gelation concentration of arm-less polymers of size m >= 2."""
    if m < 2:
        raise ValueError("zero-arm particles have size >= 2")
    _check_pre_gel(mu, t)
    if t == 0.0:
        return 0.0
    nu = offspring_from_arms(mu)
    log_conv = convolution_power(nu, m, m - 2).log(m - 2)
    return math.exp(_log_zero_arms(moment(mu, 1), t, m, log_conv))


def limited_closed_form_field(mu: ArmMeasure, t: float, A_max: int, M_max: int) -> np.ndarray:
    """All c_t(a, m), 0 <= a <= A_max, 1 <= m <= M_max, sharing one pass of convolution powers."""
    _check_pre_gel(mu, t)
    nu = offspring_from_arms(mu)
    a1 = moment(mu, 1)
    c = np.zeros((A_max + 1, M_max + 1))
    k_max = A_max + M_max - 2
    for m, p in iter_convolution_powers(nu, M_max, max(k_max, 0)):
        for a in range(1, A_max + 1):
            c[a, m] = math.exp(_log_limited(a1, t, a, m, p.log(a + m - 2)))
        if m >= 2 and t > 0.0:
            c[0, m] = math.exp(_log_zero_arms(a1, t, m, p.log(m - 2)))
    return c


def limiting_concentration(mu: ArmMeasure, a: int, m: int) -> float:
    """t -> infinity limit of c_t(a, m); nonzero only for a = 0."""
    if m < 2:
        raise ValueError("limits are defined for m >= 2")
    if a < 0:
        raise ValueError("a must be nonnegative")
    if a >= 1:
        return 0.0
    return float(limiting_zero_arm_table(mu, m)[m])


def limiting_zero_arm_table(mu: ArmMeasure, m_max: int) -> np.ndarray:
    """c_inf(0, m) for m = 0..m_max (zero below 2)."""
    nu = offspring_from_arms(mu)
    log_beta = 0.0
    if mu.gels:
        _, beta = eta_beta(nu)
        log_beta = math.log(beta)
    logs = log_dwass_terms(nu, m_max)
    out = np.zeros(m_max + 1)
    a1 = moment(mu, 1)
    for m in range(2, m_max + 1):
        if logs[m] > -math.inf:
            out[m] = math.exp(math.log(a1) - math.log(m * (m - 1)) + (m - 1) * log_beta + logs[m])
    return out


class MassIdentity(NamedTuple):
    lhs: float
    rhs: float
    tail_estimate: float


def terminal_mass_identity(mu: ArmMeasure, m_bound: int = 1000) -> MassIdentity:
    """Terminal polymer mass sum_{m<=m_bound} m c_inf(0, m) against the initial atom mass.

    The tail estimate extrapolates the last two terms geometrically; it is
    ``inf`` when the terms are not decaying.
    """
    if mu.gels:
        raise NotGellingError("terminal mass identity only holds without gelation")
    c = limiting_zero_arm_table(mu, m_bound)
    terms = np.arange(m_bound + 1) * c
    lhs = math.fsum(terms[::-1])
    last, prev = terms[-1], terms[-2]
    if last == 0.0:
        tail = 0.0
    elif prev > 0.0 and last < prev:
        r = last / prev
        tail = last * r / (1.0 - r)
    else:
        tail = math.inf
    return MassIdentity(lhs, mu.total, tail)


def merle_normand_limits(mu: ArmMeasure) -> tuple[float, Pmf]:
    """Terminal solution fraction m_inf and the arm law pi_inf of atoms left in solution.

    ``mu`` is normalised to a probability first.
    """
    if not mu.gels:
        raise NotGellingError("no gelation: solution limits are trivial (1 and mu)")
    p = mu.normalized().weights
    eta, _ = eta_beta(offspring_from_arms(mu))
    w = eta ** np.arange(p.size) * p
    m_inf = math.fsum(w[::-1])
    return m_inf, Pmf(w[1:] / m_inf, offset=1)


# ---------------------------------------------------------------- integrators


@dataclass
class Trajectory:
    """Integrator output at the requested times.

    ``truncation_leak[i]`` is the cumulative mass removed by coagulations whose
    product falls outside the truncated field, up to ``times[i]``.
    """

    times: np.ndarray
    states: np.ndarray
    truncation_leak: np.ndarray
    kind: str
    steps: list[int] = field(default_factory=list)

    def at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, t))
        if i == self.times.size or not math.isclose(self.times[i], t, rel_tol=0, abs_tol=1e-12):
            raise KeyError(f"time {t} not recorded")
        return self.states[i]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def mass(self) -> np.ndarray:
        """<c_t, Id> at every recorded time."""
        shape = self.states.shape
        m = np.arange(shape[-1], dtype=float)
        flat = (self.states * m).reshape(shape[0], -1)
        return np.array([math.fsum(row[::-1]) for row in flat])


def _mono_rhs(c: np.ndarray) -> tuple[np.ndarray, float]:
    M = c.size - 1
    m = np.arange(M + 1, dtype=float)
    x = m * c
    full = np.convolve(x, x)
    dc = 0.5 * full[: M + 1] - x * x.sum()
    leak = 0.5 * float(np.dot(np.arange(M + 1, full.size), full[M + 1:]))
    return dc, leak


def _limited_rhs(c: np.ndarray) -> tuple[np.ndarray, float]:
    A, M = c.shape[0] - 1, c.shape[1] - 1
    x = np.arange(A + 1, dtype=float)[:, None] * c
    full = fftconvolve(x, x)
    # products hold at least two atoms; clear FFT round-off from the empty columns
    full[:, :2] = 0.0
    # (a', m') + (a'', m'') -> (a' + a'' - 2, m' + m''): row i of full maps to a = i - 2
    dc = -x * x.sum()
    rows = full[2: A + 3, : M + 1]
    dc[: rows.shape[0]] += 0.5 * rows
    mass = np.arange(full.shape[1], dtype=float)
    total = 0.5 * float(full.sum(axis=0) @ mass)
    kept = 0.5 * float(rows.sum(axis=0) @ mass[: M + 1])
    return dc, total - kept


def _rk4(rhs, y: np.ndarray, t0: float, t1: float, n: int) -> tuple[np.ndarray, float]:
    h = (t1 - t0) / n
    leak = 0.0
    for _ in range(n):
        k1, l1 = rhs(y)
        k2, l2 = rhs(y + 0.5 * h * k1)
        k3, l3 = rhs(y + 0.5 * h * k2)
        k4, l4 = rhs(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        leak += h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
    return y, leak


def _integrate(rhs, y0, times, h, tol, max_steps, kind) -> Trajectory:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] < 0:
        raise ValueError("times must be a nonempty sequence of nonnegative reals")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if times[0] > 0:
        times = np.concatenate([[0.0], times])
    states = [y0.copy()]
    leaks = [0.0]
    steps = []
    y, leak = y0.copy(), 0.0
    for t0, t1 in zip(times[:-1], times[1:]):
        n = max(1, math.ceil((t1 - t0) / h - 1e-9))
        # a step beyond the stability limit may overflow; the NaN then fails the
        # tolerance test and the step keeps halving
        with np.errstate(over="ignore", invalid="ignore"):
            coarse, lc = _rk4(rhs, y, t0, t1, n)
            while True:
                if 2 * n > max_steps:
                    raise InstabilityError(f"step refinement did not converge on [{t0}, {t1}]")
                fine, lf = _rk4(rhs, y, t0, t1, 2 * n)
                n *= 2
                if np.max(np.abs(fine - coarse)) < tol:
                    break
                coarse, lc = fine, lf
        if not np.all(np.isfinite(fine)) or fine.min() < -NEG_TOL:
            raise InstabilityError("instability, reduce step")
        y, leak = fine, leak + lf
        states.append(y.copy())
        leaks.append(leak)
        steps.append(n)
    return Trajectory(times, np.array(states), np.maximum.accumulate(np.array(leaks)), kind, steps)


def integrate_mono(c0: np.ndarray, t_end: float, M_max: int | None = None, *,
                   times=None, h: float = 0.01, tol: float = 1e-8,
                   max_steps: int = 2**20) -> Trajectory:
    """Truncated multiplicative-kernel system before gelation, fixed-step RK4.

    Each output interval starts at step ``h``; the step is halved until two
    successive refinements agree to ``tol`` in sup norm. Products heavier than
    ``M_max`` leave the field and are booked as truncation leak.
    """
    c0 = np.asarray(c0, dtype=float)
    if M_max is None:
        M_max = c0.size - 1
    y0 = np.zeros(M_max + 1)
    y0[: min(c0.size, M_max + 1)] = c0[: M_max + 1]
    y0[0] = 0.0
    if t_end >= tgel_multiplicative(y0):
        raise GelationError("t_end at or past the gelation time")
    if times is None:
        times = [0.0, t_end] if t_end > 0 else [0.0]
    times = np.asarray(times, dtype=float)
    if times[-1] != t_end:
        raise ValueError("last output time must equal t_end")
    return _integrate(_mono_rhs, y0, times, h, tol, max_steps, "mono")


def limited_initial_field(mu: ArmMeasure, A_max: int, M_max: int) -> np.ndarray:
    if mu.a_max > A_max:
        raise ValueError("A_max smaller than the arm support")
    c = np.zeros((A_max + 1, M_max + 1))
    c[: mu.a_max + 1, 1] = mu.weights
    return c


def integrate_limited(mu: ArmMeasure, t_end: float, A_max: int, M_max: int, *,
                      times=None, h: float = 0.01, tol: float = 1e-8,
                      max_steps: int = 2**20) -> Trajectory:
    """Truncated two-index system with arm-product rates, same scheme as integrate_mono."""
    if t_end >= tgel_limited(mu):
        raise GelationError("t_end at or past the gelation time")
    y0 = limited_initial_field(mu, A_max, M_max)
    if times is None:
        times = [0.0, t_end] if t_end > 0 else [0.0]
    times = np.asarray(times, dtype=float)
    if times[-1] != t_end:
        raise ValueError("last output time must equal t_end")
    return _integrate(_limited_rhs, y0, times, h, tol, max_steps, "limited")


def _bilinear(c: np.ndarray, f: np.ndarray, kind: str) -> float:
    """(1/2) sum (f(product) - f(x) - f(y)) K(x, y) c(x) c(y) for the truncated field."""
    if kind == "mono":
        m = np.arange(c.size, dtype=float)
        x = m * c
        full = np.convolve(x, x)[: c.size]
        return 0.5 * float(f @ full) - float(f @ x) * x.sum()
    if kind == "limited":
        A, M = c.shape[0] - 1, c.shape[1] - 1
        x = np.arange(A + 1, dtype=float)[:, None] * c
        full = fftconvolve(x, x)
        full[:, :2] = 0.0
        rows = full[2: A + 3, : M + 1]
        gain = float(np.sum(f[: rows.shape[0]] * rows))
        return 0.5 * gain - float(np.sum(f * x)) * x.sum()
    raise ValueError(f"unknown kernel {kind!r}")


def weak_form_residual(traj: Trajectory, f, kernel: str | None = None) -> float:
    """Max over recorded times of |d/dt <c_t, f> - bilinear term|.

    The time derivative is a second-order finite difference over
    ``traj.times``, so the residual measures both the equation and the time
    resolution of the trajectory.
    """
    kind = kernel or traj.kind
    f = np.asarray(f, dtype=float)
    if f.shape != traj.states.shape[1:]:
        raise ValueError("test function must match the field shape")
    if traj.times.size < 3:
        raise ValueError("need at least three recorded times")
    pair = np.array([float(np.sum(f * s)) for s in traj.states])
    deriv = np.gradient(pair, traj.times, edge_order=2)
    bil = np.array([_bilinear(s, f, kind) for s in traj.states])
    return float(np.max(np.abs(deriv - bil)))


def arm_density(c: np.ndarray) -> float:
    """sum_{a, m} a c(a, m)."""
    a = np.arange(c.shape[0], dtype=float)
    return math.fsum((a[:, None] * c).ravel()[::-1])
