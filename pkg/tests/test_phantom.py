import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arpam.core import AcquisitionGeometry, LateralImage, PsfModel, RfVolume, map_projection
from arpam.metrics import fwhm_across
from arpam.phantom import (
    LineSegment,
    NoiseSpec,
    Point,
    SceneError,
    SceneSpec,
    add_noise,
    add_noise_map,
    converging_wires,
    crossed_wires,
    format_scene,
    parse_scene,
    pulse,
    render_lateral,
    simulate,
)

PSF = PsfModel()


def _geo(z_off=0.0, index=16):
    g = AcquisitionGeometry()
    return g.with_t0_for_depth(g.focal_length + z_off, index)


def test_empty_scene_gives_zeros():
    vol = simulate(SceneSpec(), _geo(), PSF, (5, 6, 7))
    assert vol.dims == (5, 6, 7)
    assert not np.any(vol.samples)


def test_in_focus_point_width():
    vol = simulate(SceneSpec((Point(0, 0, 0, 1.0),)), _geo(), PSF, (41, 41, 32))
    w = fwhm_across(map_projection(vol), (0.0, 0.0), 0.0, 0.2e-3)
    assert abs(w - 65e-6) <= 3e-6
    assert abs(w - 65e-6) <= vol.geometry.dx


def test_defocused_point_follows_cone_law():
    z = 0.6e-3
    vol = simulate(SceneSpec((Point(0, 0, z, 1.0),)), _geo(z, 8), PSF, (61, 61, 64))
    w = fwhm_across(map_projection(vol), (0.0, 0.0), 0.0, 0.42e-3)
    oracle = 2 * z * math.tan(math.asin(0.44))
    assert w == pytest.approx(oracle, rel=0.10)


def test_point_width_grows_with_defocus():
    widths = []
    for z in (0.0, 0.2e-3, 0.4e-3, 0.6e-3):
        vol = simulate(SceneSpec((Point(0, 0, z, 1.0),)), _geo(z, 8), PSF, (61, 61, 48))
        widths.append(fwhm_across(map_projection(vol), (0.0, 0.0), 0.0, 0.42e-3))
    assert all(b > a for a, b in zip(widths, widths[1:]))


def test_negative_defocus_arrives_earlier():
    z = -0.3e-3
    vol = simulate(SceneSpec((Point(0, 0, z, 1.0),)), _geo(z, 40), PSF, (31, 31, 48))
    centre = np.argmax(np.abs(vol.samples[15, 15]))
    edge = np.argmax(np.abs(vol.samples[15, 25]))
    assert edge < centre


def test_in_focus_wire_peak_equals_amplitude():
    scene = SceneSpec((LineSegment(-1.0e-3, 0.0, 1.0e-3, 0.0, 0.0, 2.0),))
    vol = simulate(scene, _geo(), PSF, (161, 41, 32))
    assert map_projection(vol).pixels[80, 20] == pytest.approx(2.0, rel=0.02)


def test_linearity():
    a = SceneSpec((Point(30e-6, -45e-6, 0.1e-3, 1.0),))
    b = crossed_wires(0.2e-3, 0.2e-3)
    geo = _geo(0.1e-3, 8)
    dims = (31, 31, 40)
    both = simulate(a + b, geo, PSF, dims).samples
    parts = simulate(a, geo, PSF, dims).samples + simulate(b, geo, PSF, dims).samples
    np.testing.assert_allclose(both, parts, rtol=0, atol=1e-9)


def test_translation_covariance():
    geo = _geo(0.2e-3, 8)
    scene = SceneSpec((Point(0.0, 0.0, 0.2e-3, 1.0),))
    k = 3
    m0 = map_projection(simulate(scene, geo, PSF, (41, 41, 40))).pixels
    m1 = map_projection(simulate(scene.shifted(k * geo.dx, 0.0), geo, PSF, (41, 41, 40))).pixels
    np.testing.assert_allclose(m1[10 + k:31 + k, 10:31], m0[10:31, 10:31], atol=1e-12)


def test_out_of_field_rejected():
    with pytest.raises(SceneError, match="absorber out of field"):
        simulate(SceneSpec((Point(1.0, 0.0, 0.0, 1.0),)), _geo(), PSF, (11, 11, 16))
    with pytest.raises(SceneError, match="absorber out of field"):
        simulate(SceneSpec((Point(0.0, 0.0, 5e-3, 1.0),)), _geo(), PSF, (11, 11, 16))


def test_pulse_shape():
    tau = np.linspace(-8, 8, 4001)
    p = pulse(tau, 1.0)
    assert np.max(np.abs(p)) == pytest.approx(1.0, abs=1e-6)
    assert abs(np.trapezoid(p, tau) if hasattr(np, "trapezoid") else np.trapz(p, tau)) < 1e-9
    assert pulse(0.0, 1.0) == 0.0


def test_simulation_is_deterministic():
    scene = crossed_wires(0.3e-3, 0.2e-3)
    a = simulate(scene, _geo(0.3e-3, 8), PSF, (21, 21, 32)).samples
    b = simulate(scene, _geo(0.3e-3, 8), PSF, (21, 21, 32)).samples
    assert np.array_equal(a, b)


# --- noise -------------------------------------------------------------------------

def _unit_peak_volume(shape=(50, 50, 40)):
    s = np.zeros(shape)
    s[3, 4, 5] = 1.0
    return RfVolume(AcquisitionGeometry(), s)


def test_noise_infinite_psnr_is_identity():
    vol = _unit_peak_volume()
    out = add_noise(vol, NoiseSpec(math.inf, 1))
    assert np.array_equal(out.samples, vol.samples)


def test_noise_sigma_matches_psnr():
    vol = _unit_peak_volume()
    out = add_noise(vol, NoiseSpec(20.0, 7))
    diff = (out.samples - vol.samples).ravel()
    assert diff.size >= 1e5
    assert np.std(diff) == pytest.approx(0.1, rel=0.03)


def test_noise_reproducible_by_seed():
    vol = _unit_peak_volume((10, 10, 10))
    a = add_noise(vol, NoiseSpec(14.0, 3)).samples
    b = add_noise(vol, NoiseSpec(14.0, 3)).samples
    c = add_noise(vol, NoiseSpec(14.0, 4)).samples
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_noise_on_zero_signal_rejected():
    vol = RfVolume(AcquisitionGeometry(), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="cannot set PSNR on zero signal"):
        add_noise(vol, NoiseSpec(20.0))


def test_map_noise_stays_nonnegative():
    img = LateralImage(np.eye(20), 1e-5, 1e-5)
    out = add_noise_map(img, NoiseSpec(10.0, 0))
    assert np.all(out.pixels >= 0)


# --- scene files ------------------------------------------------------------------------

def test_parse_scene_lines_and_comments():
    text = """
    # two absorbers
    POINT 0 1e-5 -2e-4 1.5   # trailing comment
    line -1e-4 0 1e-4 0 3e-4 0.5
    """
    scene = parse_scene(text)
    assert scene.absorbers == (Point(0.0, 1e-5, -2e-4, 1.5),
                               LineSegment(-1e-4, 0.0, 1e-4, 0.0, 3e-4, 0.5))


@pytest.mark.parametrize("text, line", [
    ("POINT 0 0 0\n", 1), ("# ok\nPOINT 0 0 0 x\n", 2), ("\n\nCIRCLE 0 0 1 1\n", 3),
    ("POINT 0 0 0 -1\n", 1),
])
def test_parse_scene_errors_carry_line_numbers(text, line):
    with pytest.raises(SceneError, match=f"line {line}"):
        parse_scene(text)


finite = st.floats(-1e-3, 1e-3, allow_nan=False)


@given(st.lists(st.one_of(
    st.builds(Point, finite, finite, finite, st.floats(1e-3, 10)),
    st.builds(LineSegment, finite, finite, finite, finite, finite, st.floats(1e-3, 10)),
), max_size=5))
def test_scene_format_round_trip(absorbers):
    scene = SceneSpec(tuple(absorbers))
    assert parse_scene(format_scene(scene)) == scene


def test_converging_wires_geometry():
    scene = converging_wires(0.0, 1.0e-3, 0.2e-3)
    a, b = scene.absorbers
    assert (a.x1, a.y1) == (b.x1, b.y1)
    assert math.hypot(a.x2 - b.x2, a.y2 - b.y2) == pytest.approx(0.2e-3)


def test_render_lateral_point_width():
    img = render_lateral(SceneSpec((Point(0, 0, 0, 1.0),)), (41, 41), 5e-6, 5e-6, 40e-6)
    w = fwhm_across(LateralImage(img, 5e-6, 5e-6), (0.0, 0.0), 0.3, 0.08e-3)
    assert w == pytest.approx(40e-6, rel=0.02)
