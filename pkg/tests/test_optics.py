import math

import numpy as np
import pytest

from spadreadout.optics import (
    HIT,
    STATUS_NAMES,
    GeometryStack,
    Layer,
    collection_efficiency,
    cone_fraction,
    crosstalk_curve,
    disk_solid_angle_fraction,
    fresnel_reflectance,
    importance_region,
    default_stack,
    refract,
    sample_cone,
    trace_ray,
    trace_rays,
)


def _dir(theta_deg, phi_deg=0.0, up=False):
    t, f = math.radians(theta_deg), math.radians(phi_deg)
    return [math.sin(t) * math.cos(f), math.sin(t) * math.sin(f), (1 if up else -1) * math.cos(t)]


def test_stack_invariants():
    with pytest.raises(ValueError):
        GeometryStack(50e-6, (Layer("x", 0.0),))
    with pytest.raises(ValueError):
        GeometryStack(50e-6, (Layer("x", 1e-6, 0.9),))
    with pytest.raises(ValueError):
        GeometryStack(50e-6, (Layer("m", 1e-6, 1.0, 50e-6),), spad_diameter=40e-6)
    s = default_stack()
    assert s.stack_height == pytest.approx(13.5e-6) and s.ion_z == pytest.approx(63.5e-6)


def test_straight_down_hits():
    assert trace_ray([0, 0, default_stack().ion_z], [0, 0, -1.0], default_stack()).hit


def test_grazing_ray_blocked_by_trap_metal():
    r = trace_ray([0, 0, default_stack().ion_z], _dir(89), default_stack())
    assert not r.hit and r.reason == "absorbed"


def test_snell_refraction_angle():
    out = refract(np.array(_dir(30)), 1.0, 1.46)
    theta = math.degrees(math.atan2(math.hypot(out[0], out[1]), -out[2]))
    assert theta == pytest.approx(math.degrees(math.asin(0.5 / 1.46)), abs=1e-12)
    assert round(theta, 1) == 20.0
    assert refract(np.array(_dir(60, up=True)), 1.46, 1.0) is None


def test_snell_path_endpoint():
    # 50 um vacuum then 10 um of oxide; the ray is aimed to land on the SPAD centre
    stack = GeometryStack(50e-6, (Layer("oxide", 10e-6, 1.46),), 40e-6, fresnel=False)
    dx_vac = 50e-6 * math.tan(math.radians(30))
    dx_ox = 10e-6 * math.tan(math.asin(0.5 / 1.46))
    x0 = -(dx_vac + dx_ox)
    r = trace_ray([x0, 0, stack.ion_z], _dir(30), stack)
    assert r.hit
    assert r.path[1] == pytest.approx([x0 + dx_vac, 0, 10e-6], abs=1e-15)
    assert r.path[-1] == pytest.approx([0, 0, 0], abs=1e-15)


def test_total_internal_reflection():
    stack = GeometryStack(50e-6, (Layer("oxide", 10e-6, 1.46),), 40e-6, fresnel=False)
    assert trace_ray([0, 0, 5e-6], _dir(60, up=True), stack).reason == "tir"
    assert trace_ray([0, 0, 5e-6], _dir(45, up=True), stack).reason == "tir"
    assert trace_ray([0, 0, 5e-6], _dir(30, up=True), stack).reason == "escaped"
    # tracked, a 45 degree ray (above the 43.2 degree critical angle) reflects once and lands 15 um off axis
    tracked = stack.replace(track_reflections=True, max_bounces=8)
    assert trace_ray([0, 0, 5e-6], _dir(45, up=True), tracked).reason == "hit"


def test_direction_must_be_unit():
    with pytest.raises(ValueError):
        trace_ray([0, 0, 63.5e-6], [0, 0, -0.9], default_stack())
    with pytest.raises(ValueError):
        trace_rays([0, 0, 63.5e-6], np.array([[0, 0, -1.1]]), default_stack())


def test_fresnel_reflectance():
    assert fresnel_reflectance(1.0, 1.0, 1.46) == pytest.approx((0.46 / 2.46) ** 2)
    assert fresnel_reflectance(0.5, 1.46, 1.0) == 1.0
    assert fresnel_reflectance(1.0, 1.46, 1.46) == 0.0


@pytest.mark.invariant
def test_every_ray_terminates():
    rng = np.random.default_rng(1)
    stack = default_stack()
    for offset in (0.0, 60e-6):
        d = sample_cone(50_000, 0.5 * math.pi, rng)
        status = trace_rays([offset, 0, stack.ion_z], d, stack, rng)
        assert np.all(status > 0)
        hits = int(np.sum(status == HIT))
        misses = int(np.sum(status != HIT))
        assert hits + misses == d.shape[0]
        assert set(np.unique(status)) <= set(range(1, len(STATUS_NAMES)))


@pytest.mark.invariant
def test_standard_error_scaling():
    # doubling the ray count halves the variance: F-test on 60 repetitions each
    rng = np.random.default_rng(2)
    stack = default_stack()
    a = [collection_efficiency(0.0, stack, 10_000, rng)[0] for _ in range(60)]
    b = [collection_efficiency(0.0, stack, 20_000, rng)[0] for _ in range(60)]
    ratio = np.var(a, ddof=1) / np.var(b, ddof=1)
    assert 2 * 0.52 < ratio < 2 * 1.93  # 99% F(59, 59) band around 2
    se = collection_efficiency(0.0, stack, 10_000, rng)[1]
    assert 0.52 < np.var(a, ddof=1) / se**2 < 1.93


@pytest.mark.invariant
@pytest.mark.parametrize("offset", [0.0, 12e-6, 35e-6])
def test_uniform_index_matches_disk_oracle(offset):
    stack = default_stack().with_uniform_index(1.0, remove_apertures=True)
    f, se = collection_efficiency(offset, stack, 400_000, np.random.default_rng(3))
    oracle = disk_solid_angle_fraction(20e-6, stack.ion_z, offset)
    assert abs(f - oracle) < 3 * se


def test_small_aperture_cone_limit():
    # vacuum everywhere and a thin trap metal: every ray through the 30 um aperture lands on the SPAD
    stack = default_stack(trap_metal_thickness=1e-9).with_uniform_index(1.0)
    f, se = collection_efficiency(0.0, stack, 400_000, np.random.default_rng(4))
    assert abs(f - cone_fraction(math.atan(15e-6 / 50e-6))) < 3 * se
    # with a thick metal the aperture's lower face is the limiting edge
    thick = default_stack().with_uniform_index(1.0)
    f, se = collection_efficiency(0.0, thick, 400_000, np.random.default_rng(4))
    assert abs(f - cone_fraction(math.atan(15e-6 / 51e-6))) < 3 * se


def test_disk_oracle_closed_form_and_quadrature_agree():
    a = disk_solid_angle_fraction(20e-6, 63.5e-6, 0.0)
    b = disk_solid_angle_fraction(20e-6, 63.5e-6, 1e-12)
    assert a == pytest.approx(b, rel=1e-8)


def test_geometric_cutoff_gives_zero():
    f, se = collection_efficiency(2e-3, default_stack(), 100_000, np.random.default_rng(5))
    assert f == 0.0 and se == 0.0


def test_efficiency_is_even():
    stack = default_stack()
    a, sa = collection_efficiency(60e-6, stack, 300_000, np.random.default_rng(6))
    b, sb = collection_efficiency(-60e-6, stack, 300_000, np.random.default_rng(7))
    assert abs(a - b) < 3 * math.hypot(sa, sb)


def test_importance_region_contains_all_hits():
    # brute force over the whole lower hemisphere agrees with the importance-sampled estimate
    stack = default_stack()
    rng = np.random.default_rng(8)
    for offset in (0.0, 120e-6):
        region = importance_region(offset, stack)
        d = sample_cone(2_000_000, 0.5 * math.pi, rng)
        hit = trace_rays([offset, 0, stack.ion_z], d, stack, rng) == HIT
        brute = 0.5 * hit.mean()
        se_brute = 0.5 * math.sqrt(hit.mean() * (1 - hit.mean()) / hit.size)
        f, se = collection_efficiency(offset, stack, 400_000, rng)
        assert abs(f - brute) < 3 * math.hypot(se, se_brute)
        # every hit direction lies inside the sampled region
        dh = d[hit]
        theta = np.arccos(-dh[:, 2])
        assert np.all((theta >= region.theta_lo) & (theta <= region.theta_hi))


def test_fresnel_loss_at_entry():
    # near-normal incidence: one vacuum-oxide interface costs about 3.5%
    on = default_stack()
    off = default_stack(fresnel=False)
    a, sa = collection_efficiency(0.0, on, 400_000, np.random.default_rng(9))
    b, sb = collection_efficiency(0.0, off, 400_000, np.random.default_rng(10))
    assert a / b == pytest.approx(1 - 0.035, abs=0.006)


@pytest.mark.invariant
def test_monotone_in_offset():
    stack = default_stack()
    offsets = np.linspace(0, 480e-6, 25)
    curve = crosstalk_curve(offsets, stack, 200_000, np.random.default_rng(11))
    for i in range(len(offsets) - 1):
        assert curve.fractions[i + 1] <= curve.fractions[i] + 3 * math.hypot(curve.stderr[i], curve.stderr[i + 1])
    assert np.all((curve.fractions >= 0) & (curve.fractions <= 1))


def test_crosstalk_curve_normalisation():
    stack = default_stack()
    curve = crosstalk_curve([0.0, 100e-6], stack, 50_000, np.random.default_rng(12))
    assert curve.normalized[0] == 1.0
    assert curve.predicted_rate[0] == pytest.approx(60e3)
    scaled = crosstalk_curve([0.0], stack, 50_000, np.random.default_rng(12), bright_ion_scatter_rate=1e7, pde=0.3)
    assert scaled.predicted_rate[0] == pytest.approx(1e7 * 0.3 * scaled.fractions[0])
    no_zero = crosstalk_curve([100e-6], stack, 50_000, np.random.default_rng(13))
    assert no_zero.reference_fraction > no_zero.fractions[0]
    with pytest.raises(ValueError):
        crosstalk_curve([100e-6, 0.0], stack, 50_000, np.random.default_rng(12))
    with pytest.raises(ValueError):
        collection_efficiency(0.0, stack, 100, np.random.default_rng(12))
    lines = curve.to_csv().splitlines()
    assert lines[0] == "offset_um,fraction,stderr,normalized,predicted_kcps"
    assert lines[2].startswith("100.0,")


def test_metal_reflectivity_and_tracked_bounces():
    base = default_stack()
    shiny = base.replace(metal_reflectivity=0.9, track_reflections=True)
    rng = np.random.default_rng(14)
    a, sa = collection_efficiency(0.0, base, 200_000, rng)
    b, sb = collection_efficiency(0.0, shiny, 200_000, rng)
    assert b >= a - 3 * math.hypot(sa, sb)
    with pytest.raises(ValueError):
        base.replace(metal_reflectivity=1.5)
