import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polarsfp.errors import DomainError, EmptyIntersection, InsufficientViews
from polarsfp.pipeline import (
    Mode,
    NormalMap,
    PipelineConfig,
    angular_error_deg,
    compose_normal,
    disambiguate_azimuth,
    evaluate,
    run_pipeline,
    stereo_normals,
)
from polarsfp.polar import specular_dop
from polarsfp.scene import CorrespondenceMap, GroundTruth, MaterialSpec, render_views
from polarsfp.solver import Status

from .conftest import glossy_sphere

DEG = math.pi / 180


def rotations(scene):
    return [v.rotation for v in scene.views]


def truth_like(normals, index=1.5):
    h, w, _ = normals.shape
    mask = np.ones((h, w), dtype=bool)
    return GroundTruth(normals, np.zeros((1, h, w)), np.ones((h, w)), np.zeros((1, h, w)),
                       np.full((h, w), index), mask)


# --- compose_normal

@pytest.mark.parametrize("az,zen,expect", [
    (1.234, 0.0, (0, 0, 1)),
    (0.0, 0.5 * math.pi, (1, 0, 0)),
    (math.pi, 45 * DEG, (-math.sqrt(0.5), 0, math.sqrt(0.5))),
])
def test_compose_examples(az, zen, expect):
    assert compose_normal(az, zen) == pytest.approx(expect, abs=1e-15)


@given(st.floats(-10, 10), st.floats(0, 0.5 * math.pi))
def test_compose_unit_length(az, zen):
    assert abs(np.linalg.norm(compose_normal(az, zen)) - 1) <= 1e-12


def test_compose_rejects_backfacing():
    with pytest.raises(DomainError):
        compose_normal(0.0, 2.0)


# --- disambiguate_azimuth

def test_disambiguate_outward():
    mask = np.zeros((21, 21), dtype=bool)
    mask[5:16, 5:16] = True
    phase = np.zeros((21, 21))
    phase[10, 15] = 0.0          # right of centre
    phase[10, 5] = 0.0           # left of centre
    phase[5, 10] = 0.5 * math.pi  # above centre (image rows grow downward)
    phase[15, 10] = 0.5 * math.pi
    az = disambiguate_azimuth(phase, mask)
    assert az[10, 15] == pytest.approx(0.0)
    assert abs(az[10, 5]) == pytest.approx(math.pi)
    assert az[5, 10] == pytest.approx(0.5 * math.pi)
    assert az[15, 10] == pytest.approx(-0.5 * math.pi)


def test_disambiguate_none_is_identity(rng):
    phase = rng.uniform(0, math.pi, (8, 8))
    assert np.array_equal(disambiguate_azimuth(phase, phase > 1, "none"), phase)


def test_disambiguate_unknown_policy():
    with pytest.raises(DomainError):
        disambiguate_azimuth(np.zeros((2, 2)), np.ones((2, 2), bool), "guess")


# --- evaluate

def test_evaluate_identity_is_zero(small_render):
    _, _, truth, _ = small_render
    m = evaluate(NormalMap(truth.normals, truth.mask), truth, truth.index_map, truth.diffuse_image)
    assert (m.normal_mse, m.mean_angular_error_deg, m.index_mae, m.diffuse_rel_error) == (0, 0, 0, 0)


def test_evaluate_uniform_index_offset():
    n = np.zeros((4, 4, 3))
    n[..., 2] = 1
    m = evaluate(NormalMap(n, np.ones((4, 4), bool)), truth_like(n), index=np.full((4, 4), 1.49))
    assert m.index_mae == pytest.approx(0.01, abs=1e-12)


def test_evaluate_sixty_degrees():
    gt = np.zeros((3, 5, 3))
    gt[..., 2] = 1
    est = np.zeros_like(gt)
    est[..., 0] = math.sin(60 * DEG)
    est[..., 2] = math.cos(60 * DEG)
    m = evaluate(NormalMap(est, np.ones((3, 5), bool)), truth_like(gt))
    assert m.mean_angular_error_deg == pytest.approx(60.0, abs=1e-9)
    assert m.normal_mse == pytest.approx(1.0, abs=1e-12)


def test_evaluate_errors():
    n = np.zeros((4, 4, 3))
    n[..., 2] = 1
    with pytest.raises(EmptyIntersection):
        evaluate(NormalMap(n, np.zeros((4, 4), bool)), truth_like(n))
    with pytest.raises(ValueError):
        evaluate(NormalMap(np.zeros((3, 4, 3)), np.ones((3, 4), bool)), truth_like(n))


# --- configuration

def test_config_validation():
    with pytest.raises(DomainError):
        PipelineConfig(assumed_n=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(mode="sideways")
    with pytest.raises(DomainError):
        PipelineConfig(zenith_init="psychic")


def test_corrected_needs_two_views(small_render):
    _, stacks, _, corr = small_render
    one = CorrespondenceMap(corr.coords[:1])
    with pytest.raises(InsufficientViews):
        run_pipeline(stacks[:1], one, PipelineConfig(mode=Mode.CORRECTED_MIXED))


# --- end to end

@pytest.fixture(scope="module")
def specular_only():
    scene = glossy_sphere(64, views=1, material=MaterialSpec(1.5, 0.0, 1.0, 3.0))
    stacks, truth, _ = render_views(scene)
    return stacks, truth


def test_uncorrected_exact_on_pure_specular(specular_only):
    stacks, truth = specular_only
    res = run_pipeline(stacks, None, PipelineConfig(mode="uncorrected_specular", assumed_n=1.5))
    m = res.normals[0].mask & truth.mask
    assert m.sum() > 500
    assert angular_error_deg(res.normals[0].normals[m], truth.normals[m]).mean() < 0.1


def test_refractive_distortion(specular_only):
    stacks, truth = specular_only
    res = run_pipeline(stacks, None, PipelineConfig(mode="uncorrected_specular", assumed_n=1.3))
    m = res.normals[0].mask & truth.mask
    bias = res.zenith[0][m] - truth.zenith_per_view[0][m]
    # a lower assumed index maps every DoP to a smaller zenith
    assert np.all(bias < 0)
    assert angular_error_deg(res.normals[0].normals[m], truth.normals[m]).mean() > 1.0


def test_pure_diffuse_is_degenerate():
    scene = glossy_sphere(48, material=MaterialSpec(1.5, 0.6, 0.0, 3.0))
    stacks, truth, corr = render_views(scene)
    res = run_pipeline(stacks, corr, PipelineConfig(), rotations(scene))
    d = res.diagnostics
    assert d["degenerate_fraction"] == 1.0
    assert d["status_counts"]["degenerate"] == d["tracked_pixels"]
    assert d["failed_pixels"] == 0
    assert all(not n.mask.any() for n in res.normals)
    assert np.all(np.isnan(res.index))
    # diffuse is still defined: it is the view-averaged intensity, exact up to resampling
    err = np.abs(res.diffuse[truth.mask] - truth.diffuse_image[truth.mask])
    assert np.median(err) < 1e-3 and err.max() < 0.02


@pytest.fixture(scope="module")
def corrected(small_render):
    scene, stacks, truth, corr = small_render
    return run_pipeline(stacks, corr, PipelineConfig(), rotations(scene))


def test_corrected_recovers_index_and_normals(small_render, corrected):
    _, _, truth, _ = small_render
    res = corrected
    assert np.nanmean(np.abs(res.index - 1.5)) <= 0.02
    m = evaluate(res.normals[0], truth, res.index, res.diffuse)
    assert m.mean_angular_error_deg < 1.0
    for nm in res.normals:
        assert np.allclose(np.linalg.norm(nm.normals[nm.mask], axis=-1), 1.0, atol=1e-9)


def test_corrected_beats_uncorrected(small_render, corrected):
    scene, stacks, truth, corr = small_render
    base = run_pipeline(stacks, corr, PipelineConfig(mode="uncorrected_specular"), rotations(scene))
    common = corrected.normals[0].mask & base.normals[0].mask
    a = evaluate(corrected.normals[0], truth, mask=common)
    b = evaluate(base.normals[0], truth, mask=common)
    assert a.normal_mse <= 0.5 * b.normal_mse


def test_separated_dop_consistency(corrected):
    res = corrected
    conv = res.status == Status.CONVERGED
    for v in range(res.zenith.shape[0]):
        I = res.intensity[v][conv]
        rho = res.dop[v][conv]
        keep = rho >= res.diagnostics["dop_floor"]
        tilde = rho[keep] * I[keep] / (I[keep] - res.diffuse[conv][keep])
        model = specular_dop(res.zenith[v][conv][keep], res.index[conv][keep])
        assert np.max(np.abs(tilde - model)) < 1e-6


def test_view_relabel_equivariance(small_render, corrected):
    scene, stacks, truth, corr = small_render
    perm = [2, 0, 1]
    rots = rotations(scene)
    relabeled = run_pipeline([stacks[p] for p in perm], CorrespondenceMap(corr.coords[perm], reference_view=1),
                             PipelineConfig(), [rots[p] for p in perm])
    for k, p in enumerate(perm):
        a, b = corrected.normals[p], relabeled.normals[k]
        assert np.array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.normals[a.mask] - b.normals[b.mask])) < 1e-6
    assert np.nanmax(np.abs(corrected.index - relabeled.index)) < 1e-6


def test_stereo_normals_are_accurate(small_render):
    scene, stacks, truth, corr = small_render
    nw, ok = stereo_normals(corr, rotations(scene), [s.shape for s in stacks])
    assert ok.sum() > 0.9 * truth.mask.sum()
    assert angular_error_deg(nw[ok], truth.normals[ok]).mean() < 1.0


def test_naive_init_runs(small_render):
    scene, stacks, truth, corr = small_render
    res = run_pipeline(stacks, corr, PipelineConfig(zenith_init="naive"), rotations(scene))
    assert res.diagnostics["zenith_init"] == "naive"
    idx = res.index[np.isfinite(res.index)]
    assert idx.size and np.all((idx >= 1.05) & (idx <= 2.5))


def test_pipeline_result_unpacks(corrected):
    normals, diffuse, index, diag = corrected
    assert len(normals) == 3 and diffuse.shape == index.shape
    assert diag["mode"] == "corrected_mixed"
