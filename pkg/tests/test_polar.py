import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polarsfp.errors import DegenerateSampling, DomainError, NegativeClamp, ZeroIntensity
from polarsfp.polar import (
    IntensityDecomposition,
    PolarizerSample,
    SinusoidFit,
    brewster_angle,
    degree_of_polarization,
    diffuse_dop,
    diffuse_from_view,
    eval_sinusoid,
    fit_sinusoid,
    fit_sinusoid_stack,
    mixed_dop,
    specular_dop,
    specular_dop_dn,
)

from .oracles import DIFFUSE_45_15, SPECULAR_45_15, diffuse_dop_fresnel, grid_fit_sinusoid, specular_dop_fresnel

DEG = math.pi / 180
ANGLES = (0.0, 45 * DEG, 90 * DEG)


def samples(fit, angles=ANGLES):
    return [PolarizerSample(a, eval_sinusoid(fit, a)) for a in angles]


def phase_gap(a, b):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


fits = st.builds(
    lambda lo, span, ph: SinusoidFit(lo + span, lo, ph),
    st.floats(0.0, 10.0),
    st.floats(0.01, 10.0),
    st.floats(0.0, math.pi, exclude_max=True),
)


# --- eval_sinusoid

def test_eval_unpolarized_is_flat():
    fit = SinusoidFit(1.0, 1.0, 0.7)
    assert all(eval_sinusoid(fit, a) == pytest.approx(1.0, abs=1e-15) for a in np.linspace(0, 3, 7))


def test_eval_extremes():
    fit = SinusoidFit(2.0, 0.0, 0.0)
    assert eval_sinusoid(fit, 0.0) == 2.0
    assert eval_sinusoid(fit, math.pi / 2) == pytest.approx(0.0, abs=1e-15)


def test_eval_rejects_nonfinite_angle():
    with pytest.raises(DomainError):
        eval_sinusoid(SinusoidFit(1, 0, 0), float("nan"))


@given(fits, st.floats(-10, 10))
def test_eval_pi_periodic_and_phase_ambiguous(fit, a):
    v = eval_sinusoid(fit, a)
    assert fit.i_min - 1e-9 <= v <= fit.i_max + 1e-9
    assert eval_sinusoid(fit, a + math.pi) == pytest.approx(v, abs=1e-9)
    shifted = SinusoidFit(fit.i_max, fit.i_min, fit.phase + math.pi)
    assert eval_sinusoid(shifted, a) == pytest.approx(v, abs=1e-9)


# --- fit_sinusoid

@pytest.mark.parametrize("pairs", [
    [(0.0, 1.5), (45 * DEG, 1.0), (90 * DEG, 0.5)],
    [(0.0, 0.8), (45 * DEG, 1.9), (90 * DEG, 1.2), (2.0, 1.0)],
])
def test_fit_matches_grid_oracle(pairs):
    fit = fit_sinusoid([PolarizerSample(a, v) for a, v in pairs])
    gmax, gmin, gph = grid_fit_sinusoid(pairs)
    assert gmax == pytest.approx(fit.i_max, abs=1e-5)
    assert gmin == pytest.approx(fit.i_min, abs=1e-5)
    assert phase_gap(gph, fit.phase) < 1e-5


def test_fit_three_samples_interpolates():
    s = [PolarizerSample(0.0, 1.5), PolarizerSample(45 * DEG, 1.0), PolarizerSample(90 * DEG, 0.5)]
    fit = fit_sinusoid(s)
    assert (fit.i_max, fit.i_min, fit.phase) == pytest.approx((1.5, 0.5, 0.0), abs=1e-12)


def test_fit_constant_is_degenerate():
    fit = fit_sinusoid([PolarizerSample(a, 0.8) for a in ANGLES])
    assert fit.degenerate and fit.phase == 0.0
    assert fit.i_max == pytest.approx(0.8) and fit.i_min == pytest.approx(0.8)


@pytest.mark.parametrize("angles", [(0.0, 0.0, 0.0), (0.0, math.pi, 2 * math.pi), (0.0, 0.3)])
def test_fit_rejects_degenerate_sampling(angles):
    with pytest.raises(DegenerateSampling):
        fit_sinusoid([PolarizerSample(a, 1.0) for a in angles])


def test_fit_negative_min_warns_and_clamps():
    s = [PolarizerSample(0.0, 1.0), PolarizerSample(45 * DEG, 0.0), PolarizerSample(90 * DEG, 0.0),
         PolarizerSample(135 * DEG, 0.0)]
    with pytest.warns(NegativeClamp):
        fit = fit_sinusoid(s)
    assert fit.clamped and fit.i_min == 0.0


def test_polarizer_sample_rejects_negative():
    with pytest.raises(DomainError):
        PolarizerSample(0.0, -1e-3)


@given(fits, st.lists(st.floats(0, math.pi), min_size=3, max_size=6))
def test_fit_round_trip_any_wellposed_angles(fit, angles):
    A = np.column_stack([np.ones(len(angles)), np.cos(2 * np.array(angles)), np.sin(2 * np.array(angles))])
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] < 0.2 * s[0]:
        return
    got = fit_sinusoid(samples(fit, angles))
    scale = fit.i_max
    assert abs(got.i_max - fit.i_max) <= 1e-9 * scale
    assert abs(got.i_min - fit.i_min) <= 1e-9 * scale
    rel_amp = (fit.i_max - fit.i_min) / (fit.i_max + fit.i_min)
    assert phase_gap(got.phase, fit.phase) <= 1e-9 / rel_amp


@given(fits)
def test_fit_invariants(fit):
    got = fit_sinusoid(samples(fit))
    assert got.i_max >= got.i_min >= 0
    assert 0 <= got.phase < math.pi


@pytest.mark.filterwarnings("ignore::polarsfp.errors.NegativeClamp")
def test_stack_fit_matches_scalar_fit(rng):
    imgs = rng.uniform(0.2, 1.0, (3, 4, 5))
    stack = fit_sinusoid_stack(ANGLES, imgs)
    for r in range(4):
        for c in range(5):
            one = fit_sinusoid([PolarizerSample(a, imgs[k, r, c]) for k, a in enumerate(ANGLES)])
            assert stack["i_max"][r, c] == pytest.approx(one.i_max, abs=1e-12)
            assert stack["phase"][r, c] == pytest.approx(one.phase, abs=1e-12)


# --- degree of polarization

@pytest.mark.parametrize("imax,imin,rho", [(2, 2, 0.0), (1, 0, 1.0), (3, 1, 0.5)])
def test_dop_examples(imax, imin, rho):
    assert degree_of_polarization(SinusoidFit(imax, imin, 0.0)) == rho


def test_dop_zero_intensity():
    with pytest.raises(ZeroIntensity):
        degree_of_polarization(SinusoidFit(0.0, 0.0, 0.0))


# --- specular model

@pytest.mark.parametrize("n", [1.1, 1.3, 1.5, 1.8, 2.0])
def test_specular_anchors(n):
    assert abs(specular_dop(math.atan(n), n) - 1.0) <= 1e-12
    assert specular_dop(0.0, n) == 0.0
    assert brewster_angle(n) == math.atan(n)


def test_specular_matches_fresnel_oracle():
    assert abs(specular_dop(math.pi / 4, 1.5) - SPECULAR_45_15) < 1e-12
    assert specular_dop(math.pi / 4, 1.5) == pytest.approx(0.8315, abs=5e-5)


@given(st.floats(0.0, 1.55), st.floats(1.05, 2.5))
def test_specular_matches_fresnel_everywhere(theta, n):
    assert specular_dop(theta, n) == pytest.approx(specular_dop_fresnel(theta, n), abs=1e-10)


@pytest.mark.parametrize("n", [1.05, 1.3, 1.5, 2.0, 2.5])
def test_specular_unimodal_about_brewster(n):
    tb = math.atan(n)
    up = np.asarray(specular_dop(np.linspace(0, tb, 4001), n))
    down = np.asarray(specular_dop(np.linspace(tb, 0.5 * math.pi - 1e-6, 4001), n))
    assert np.all(np.diff(up) > 0)
    assert np.all(np.diff(down) < 0)


@given(st.floats(0.05, 1.5), st.floats(1.05, 2.5))
def test_specular_dn_matches_finite_difference(theta, n):
    h = 1e-6
    fd = (specular_dop(theta, n + h) - specular_dop(theta, n - h)) / (2 * h)
    assert specular_dop_dn(theta, n) == pytest.approx(fd, rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("theta,n", [(0.5 * math.pi, 1.5), (-0.1, 1.5), (0.3, 1.0), (0.3, 0.9)])
def test_specular_domain(theta, n):
    with pytest.raises(DomainError):
        specular_dop(theta, n)


# --- diffuse model

def test_diffuse_matches_fresnel_oracle():
    assert abs(diffuse_dop(math.pi / 4, 1.5) - DIFFUSE_45_15) < 1e-12
    assert diffuse_dop(0.0, 1.7) == 0.0


def test_diffuse_vanishes_as_n_to_one():
    assert diffuse_dop(0.8, 1.0 + 1e-9) < 1e-15


@given(st.floats(0.0, 0.5 * math.pi), st.floats(1.05, 2.5))
def test_diffuse_matches_fresnel_everywhere(theta, n):
    assert diffuse_dop(theta, n) == pytest.approx(diffuse_dop_fresnel(theta, n), abs=1e-10)


@pytest.mark.parametrize("n", np.linspace(1.05, 2.5, 7))
def test_diffuse_increasing(n):
    v = np.asarray(diffuse_dop(np.linspace(0, 0.5 * math.pi, 4001), n))
    assert np.all(np.diff(v) > 0)


def test_diffuse_domain():
    with pytest.raises(DomainError):
        diffuse_dop(0.5 * math.pi + 1e-9, 1.5)


# --- mixed model and its inverse

def test_mixed_examples():
    t = math.pi / 4
    assert mixed_dop(t, 1.5, 1.0, 1.0) == 0.0
    assert mixed_dop(t, 1.5, 0.0, 1.0) == specular_dop(t, 1.5)
    assert mixed_dop(t, 1.5, 0.5, 1.0) == pytest.approx(0.5 * SPECULAR_45_15, abs=1e-12)
    assert mixed_dop(t, 1.5, 0.5, 1.0) == pytest.approx(0.4157, abs=1e-4)


@pytest.mark.parametrize("d,total", [(1.1, 1.0), (-0.1, 1.0), (0.0, 0.0)])
def test_mixed_domain(d, total):
    with pytest.raises(DomainError):
        mixed_dop(0.3, 1.5, d, total)


def test_diffuse_from_view_examples():
    t = math.pi / 4
    assert diffuse_from_view(0.7, 0.0, t, 1.5) == 0.7
    assert diffuse_from_view(0.7, specular_dop(t, 1.5), t, 1.5) == pytest.approx(0.0, abs=1e-15)
    assert diffuse_from_view(1.0, 0.4157, t, 1.5) == pytest.approx(0.5, abs=1e-4)
    assert diffuse_from_view(1.0, 0.5 * SPECULAR_45_15, t, 1.5) == pytest.approx(0.5, abs=1e-12)


def test_diffuse_from_view_unclamped():
    assert diffuse_from_view(1.0, 0.99, 0.3, 1.5) < 0


@pytest.mark.parametrize("theta", [0.0, 0.5 * math.pi])
def test_diffuse_from_view_domain(theta):
    with pytest.raises(DomainError):
        diffuse_from_view(1.0, 0.1, theta, 1.5)


@given(st.floats(5 * DEG, 85 * DEG), st.floats(1.1, 2.2), st.floats(0.0, 1.0), st.floats(0.01, 10.0))
def test_mixed_then_inverse_is_identity(theta, n, frac, total):
    d = frac * total
    rho = mixed_dop(theta, n, d, total)
    assert rho <= specular_dop(theta, n) + 1e-15
    assert diffuse_from_view(total, rho, theta, n) == pytest.approx(d, rel=1e-9, abs=1e-9 * total)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 1.0))
def test_decomposition_convention(d, s, rho):
    dec = IntensityDecomposition.from_model(d, s, rho)
    assert dec.total == pytest.approx(dec.diffuse + dec.specular)
    assert dec.spec_max >= dec.spec_min >= 0
    assert dec.specular == pytest.approx(0.5 * (dec.spec_max + dec.spec_min))
