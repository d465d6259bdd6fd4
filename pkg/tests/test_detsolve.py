import math

import numpy as np
import pytest

from coaglab.branching import ArmMeasure, NotGellingError, theta
from coaglab.detsolve import (
    GelationError,
    _bilinear,
    arm_density,
    integrate_limited,
    integrate_mono,
    kokholm,
    limited_closed_form,
    limited_closed_form_field,
    limited_closed_form_zero_arms,
    limiting_concentration,
    limiting_zero_arm_table,
    mcleod,
    merle_normand_limits,
    mono_field,
    terminal_mass_identity,
    tgel_limited,
    tgel_multiplicative,
    weak_form_residual,
)

DELTA1 = ArmMeasure.point(1)
HALF_HALF = ArmMeasure.from_dict({1: 0.5, 2: 0.5})
ONE_THREE = ArmMeasure.from_dict({1: 0.5, 3: 0.5})
SUB = ArmMeasure.from_dict({1: 0.9, 2: 0.1})


# ---------------------------------------------------------------- multiplicative kernel


@pytest.mark.parametrize("t", [0.0, 0.1, 0.5, 0.9])
def test_mcleod_monomers(t):
    assert mcleod(t, 1) == pytest.approx(math.exp(-t), rel=1e-15)


def test_mcleod_examples():
    assert mcleod(0.5, 2) == pytest.approx(0.25 * math.exp(-1), rel=1e-14)
    assert mcleod(0.0, 1) == 1.0
    assert all(mcleod(0.0, m) == 0.0 for m in range(2, 10))
    with pytest.raises(GelationError, match="kokholm"):
        mcleod(1.0, 3)


def test_kokholm_examples():
    assert kokholm(1.0, 1) == pytest.approx(math.exp(-1), rel=1e-15)
    assert kokholm(2.0, 1) == pytest.approx(math.exp(-1) / 2, rel=1e-15)
    with pytest.raises(GelationError):
        kokholm(0.5, 1)


def test_continuity_at_gelation():
    # d/dt mcleod(t, m) = mcleod(t, m) ((m-1)/t - m) equals -kokholm(1, m) at t = 1,
    # so the gap at 1 - eps is eps * kokholm(1, m) to first order
    for eps in (1e-6, 1e-8):
        for m in range(1, 60):
            gap = mcleod(1 - eps, m) - kokholm(1.0, m)
            assert gap == pytest.approx(eps * kokholm(1.0, m), rel=1e-4)
    for m in range(1, 60):
        assert abs(mcleod(1 - 1e-10, m) - kokholm(1.0, m)) < 1e-9


@pytest.mark.parametrize("t", [1.5, 2.0, 3.0])
def test_kokholm_mass_exceeds_theta(t):
    M = 10**4
    mass = math.fsum(m * kokholm(t, m) for m in range(M, 0, -1))
    # terms behave like m^(-3/2)/(sqrt(2 pi) t); the tail past M is at most 2/(sqrt(2 pi M) t)
    tail = 2 / (math.sqrt(2 * math.pi * M) * t)
    assert 1 / t - tail <= mass <= 1 / t
    assert mass > theta(t)
    if t == 2.0:
        assert mass == pytest.approx(0.5, abs=tail)


def test_tgel_multiplicative():
    assert tgel_multiplicative(mono_field({1: 1.0}, 5)) == 1.0
    assert tgel_multiplicative(mono_field({1: 0.5, 2: 0.5}, 5)) == 0.4
    assert tgel_multiplicative(mono_field({2: 0.5}, 5)) == 0.5
    with pytest.raises(ValueError):
        tgel_multiplicative(np.zeros(4))


def test_tgel_limited():
    assert tgel_limited(ArmMeasure.point(2)) == math.inf
    assert tgel_limited(ArmMeasure.point(3)) == 1 / 3
    assert tgel_limited(ONE_THREE) == 1.0


# ---------------------------------------------------------------- limited closed forms


@pytest.mark.parametrize("t", [0.0, 0.3, 2.0, 50.0])
def test_closed_form_single_arm(t):
    assert limited_closed_form(DELTA1, t, 1, 1) == pytest.approx(1 / (1 + t), rel=1e-14)
    for a, m in [(1, 2), (2, 1), (1, 3), (3, 4)]:
        assert limited_closed_form(DELTA1, t, a, m) == 0.0
    if t > 0:
        assert limited_closed_form_zero_arms(DELTA1, t, 2) == pytest.approx(t / (2 * (1 + t)), rel=1e-14)
        assert limited_closed_form_zero_arms(DELTA1, t, 3) == 0.0
    # mass: one monomer plus two atoms per dimer
    if t > 0:
        assert (limited_closed_form(DELTA1, t, 1, 1)
                + 2 * limited_closed_form_zero_arms(DELTA1, t, 2)) == pytest.approx(1.0, rel=1e-14)


def test_closed_form_initial_condition():
    for a in (1, 2, 3):
        assert limited_closed_form(ONE_THREE, 0.0, a, 1) == pytest.approx(ONE_THREE.weights[a] if a <= 3 else 0)
        assert limited_closed_form(ONE_THREE, 0.0, a, 2) == 0.0
    assert limited_closed_form_zero_arms(ONE_THREE, 0.0, 2) == 0.0


def test_closed_form_worked_example():
    # A1 = 1.5, nu = (1/3, 2/3), nu^{*2}(1) = 4/9
    expected = (1 / 2) * 1.5**2 * 0.5 * 1.75**-2 * (4 / 9)
    assert limited_closed_form(HALF_HALF, 0.5, 1, 2) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.08163, abs=1e-5)


def test_closed_form_refuses_post_gel():
    with pytest.raises(GelationError):
        limited_closed_form(ONE_THREE, 1.0, 1, 1)
    with pytest.raises(ValueError):
        limited_closed_form_zero_arms(ONE_THREE, 0.5, 1)


def test_closed_form_field_matches_scalar():
    c = limited_closed_form_field(HALF_HALF, 0.7, 6, 8)
    for a in range(1, 7):
        for m in range(1, 9):
            assert c[a, m] == pytest.approx(limited_closed_form(HALF_HALF, 0.7, a, m), rel=1e-12, abs=1e-300)
    for m in range(2, 9):
        assert c[0, m] == pytest.approx(limited_closed_form_zero_arms(HALF_HALF, 0.7, m), rel=1e-12)


def test_closed_form_arm_density():
    # general-A1 form of the mean arm count, A1 / (1 + A1 t)
    for mu in (HALF_HALF, SUB, ArmMeasure.from_dict({1: 0.3, 2: 0.2})):
        a1 = mu.moment(1)
        for t in (0.2, 1.0, 3.0):
            c = limited_closed_form_field(mu, t, 40, 400)
            assert arm_density(c) == pytest.approx(a1 / (1 + a1 * t), abs=1e-6)


# ---------------------------------------------------------------- limits


def test_limiting_examples():
    assert limiting_concentration(DELTA1, 0, 2) == pytest.approx(0.5, rel=1e-15)
    assert all(limiting_concentration(DELTA1, 0, m) == 0.0 for m in range(3, 10))
    assert limiting_concentration(ONE_THREE, 1, 5) == 0.0
    assert limiting_concentration(SUB, 2, 3) == 0.0
    beta = 2 / math.sqrt(3)
    assert limiting_concentration(ONE_THREE, 0, 2) == pytest.approx(beta / 16, rel=1e-12)
    assert limiting_concentration(ONE_THREE, 0, 2) == pytest.approx(0.072169, abs=1e-6)


def test_limit_of_zero_arm_closed_form():
    t = 1e8
    assert limited_closed_form_zero_arms(DELTA1, t, 2) == pytest.approx(0.5, rel=1e-7)
    for mu in (SUB, HALF_HALF):
        a1 = mu.moment(1)
        t = 1e7 / a1
        for m in range(2, 11):
            lim = limiting_concentration(mu, 0, m)
            gap = abs(limited_closed_form_zero_arms(mu, t, m) - lim) / lim
            # exact relative gap is 1 - (1 + 1/(A1 t))^(1-m), about (m-1) 1e-7 here
            assert gap == pytest.approx(-math.expm1((1 - m) * math.log1p(1 / (a1 * t))), rel=1e-3)
            assert gap < 1e-6


def test_terminal_mass_identity():
    lhs, rhs, tail = terminal_mass_identity(DELTA1, 10)
    assert (lhs, rhs) == (1.0, 1.0)
    lhs, rhs, tail = terminal_mass_identity(SUB, 1000)
    assert abs(lhs - rhs) < 1e-8
    with pytest.raises(NotGellingError):
        terminal_mass_identity(ONE_THREE)


def test_terminal_mass_identity_critical_chain():
    # all atoms carry two arms: polymers are chains that always keep two free
    # arms, so no arm-less polymer ever forms and the identity cannot hold
    lhs, rhs, _ = terminal_mass_identity(ArmMeasure.point(2), 1000)
    assert lhs == 0.0 and rhs == 1.0


def test_terminal_mass_identity_critical_nondegenerate():
    mu = ArmMeasure.from_dict({1: 0.5, 3: 1 / 6})  # A2 = 2 A1 exactly
    assert tgel_limited(mu) == math.inf
    lhs, rhs, _ = terminal_mass_identity(mu, 2000)
    # critical tail: sum_{m > M} of order M^(-1/2)
    assert rhs - 0.05 < lhs <= rhs + 1e-12


def test_merle_normand_limits():
    eta = 1 / math.sqrt(3)
    m_inf, pi = merle_normand_limits(ONE_THREE)
    assert m_inf == pytest.approx(0.5 * (eta + eta**3), rel=1e-12)
    assert m_inf == pytest.approx(0.384900, abs=1e-6)
    assert pi(1) == pytest.approx(0.75, rel=1e-12)
    assert pi(3) == pytest.approx(0.25, rel=1e-12)
    assert abs(pi.total() - 1.0) < 1e-12
    with pytest.raises(NotGellingError):
        merle_normand_limits(SUB)


def test_merle_normand_limit_is_critical():
    from coaglab.branching import criticality
    others = (ArmMeasure.from_dict({1: 0.2, 2: 0.3, 4: 0.5}), ArmMeasure.from_dict({1: 0.1, 3: 0.9}))
    for mu in (ONE_THREE, *others):
        _, pi = merle_normand_limits(mu)
        w = np.concatenate([[0.0], pi.probabilities()])
        assert criticality(ArmMeasure(w)) == pytest.approx(0.0, abs=1e-10)


def test_gelling_limit_table_uses_beta():
    table = limiting_zero_arm_table(ONE_THREE, 6)
    beta = 2 / math.sqrt(3)
    # nu = (1/4, 0, 3/4): nu^{*4}(2) = 4 * 3/4 * (1/4)^3
    assert table[4] == pytest.approx(2 / 12 * beta**3 * 4 * 0.75 * 0.25**3, rel=1e-12)
    assert table[3] == 0.0


# ---------------------------------------------------------------- integrators


def test_integrate_mono_vs_mcleod():
    traj = integrate_mono(mono_field({1: 1.0}, 60), 0.5, 60)
    err = max(abs(traj.final[m] - mcleod(0.5, m)) for m in range(1, 61))
    assert err < 1e-6


def test_integrate_mono_conserves_mass():
    times = np.linspace(0.1, 0.9, 9)
    traj = integrate_mono(mono_field({1: 1.0}, 80), 0.9, 80, times=times)
    assert np.all(np.abs(traj.mass() - 1.0) <= 1e-6 + traj.truncation_leak)
    assert np.all(np.diff(traj.truncation_leak) >= 0)
    assert traj.truncation_leak[-1] > 0


def test_integrate_mono_zero_time_and_refusals():
    c0 = mono_field({1: 0.5, 2: 0.25}, 10)
    traj = integrate_mono(c0, 0.0, 10)
    assert np.array_equal(traj.final, c0)
    with pytest.raises(GelationError):
        integrate_mono(mono_field({1: 1.0}, 10), 1.0)
    assert tgel_multiplicative(c0) == pytest.approx(2 / 3)
    with pytest.raises(GelationError):
        integrate_mono(c0, 0.7)


def test_rk4_order():
    # tol=inf accepts the first refinement, so the run uses exactly 2 ceil(T/h) steps
    # M = 200 at t = 0.5 makes the truncation error negligible next to the step error
    c0 = mono_field({1: 1.0}, 200)
    errs = []
    for h in (0.1, 0.05, 0.025):
        traj = integrate_mono(c0, 0.5, 200, h=h, tol=math.inf)
        errs.append(max(abs(traj.final[m] - mcleod(0.5, m)) for m in range(1, 201)))
    for coarse, fine in zip(errs, errs[1:]):
        assert 12 < coarse / fine < 20


def test_integrate_limited_single_arm():
    traj = integrate_limited(DELTA1, 2.0, 2, 4)
    assert abs(traj.final[1, 1] - 1 / 3) < 1e-8
    assert abs(traj.final[0, 2] - 1 / 3) < 1e-8


def test_integrate_limited_vs_closed_form():
    t = 0.5
    traj = integrate_limited(HALF_HALF, t, 40, 40)
    cf = limited_closed_form_field(HALF_HALF, t, 40, 40)
    err = max(abs(traj.final[a, m] - cf[a, m]) for a in range(41) for m in range(1, 41) if a + m <= 20)
    assert err < 1e-6
    assert arm_density(traj.final) == pytest.approx(1.5 / (1 + 1.5 * t), abs=1e-6)


def test_integrate_limited_zero_arm_monotone_and_nonnegative():
    times = np.linspace(0.05, 3.0, 60)
    traj = integrate_limited(SUB, 3.0, 8, 30, times=times)
    assert np.all(np.diff(traj.states[:, 0, :], axis=0) >= -1e-14)
    assert traj.states.min() >= -1e-10
    assert np.all(np.abs(traj.mass() - 1.0) <= 1e-6 + traj.truncation_leak)
    assert traj.states[:, 0, 1].max() == 0.0


def test_integrate_limited_refuses_post_gel():
    with pytest.raises(GelationError):
        integrate_limited(ONE_THREE, 1.0, 10, 10)


def test_integrate_limited_pre_gel_gelling_measure():
    t = 0.4  # gelation at T = 1
    # a polymer of m atoms drawn from {1, 3} carries at most 2m + 1 arms
    traj = integrate_limited(ONE_THREE, t, 201, 100)
    cf = limited_closed_form_field(ONE_THREE, t, 201, 100)
    err = max(abs(traj.final[a, m] - cf[a, m]) for a in range(202) for m in range(1, 101) if a + m <= 30)
    assert err < 1e-6


# ---------------------------------------------------------------- weak form


def test_weak_form_mono():
    times = np.linspace(0.0, 0.6, 301)
    traj = integrate_mono(mono_field({1: 1.0}, 200), 0.6, 200, times=times)
    f = np.zeros(201)
    f[1] = 1.0
    assert weak_form_residual(traj, f) < 1e-5
    assert weak_form_residual(traj, np.zeros(201)) == 0.0
    ident = np.arange(201, dtype=float)
    assert weak_form_residual(traj, ident) < 1e-5
    # mass is conserved by the untruncated equation; at M = 200 the leak is negligible
    assert max(abs(_bilinear(s, ident, "mono")) for s in traj.states) < 1e-5


def test_weak_form_limited():
    # the finite difference in time is second order: 1601 points put it near 5e-6
    times = np.linspace(0.0, 1.0, 1601)
    traj = integrate_limited(HALF_HALF, 1.0, 10, 30, times=times)
    f = np.zeros((11, 31))
    f[0, 2] = 1.0
    f[2, 3] = -2.0
    assert weak_form_residual(traj, f) < 1e-5
    mass = np.broadcast_to(np.arange(31, dtype=float), (11, 31))
    assert weak_form_residual(traj, mass) < 1e-5
    with pytest.raises(ValueError):
        weak_form_residual(traj, np.zeros(5))
