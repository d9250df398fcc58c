"""Acceptance criteria 1-11.

Each test prints one ``CRITERION n: PASS|FAIL`` line (visible with or
without ``-s``) and then asserts the same gate.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from arpam.core import (
    AcquisitionGeometry,
    DeconvConfig,
    LateralImage,
    PsfModel,
    SaftConfig,
    map_projection,
    spectrum_center,
)
from arpam.deconv import (
    ConvolutionDictionary,
    dmb_deconvolve,
    fista_l1,
    gaussian_kernel,
    l1_objective,
    richardson_lucy,
)
from arpam.metrics import fwhm_across, min_resolvable_distance
from arpam.phantom import (
    LineSegment,
    NoiseSpec,
    Point,
    SceneSpec,
    add_noise,
    converging_wires,
    crossed_wires,
    render_lateral,
    simulate,
)
from arpam.saft import (
    DirectionalStack,
    build_stack,
    build_windows,
    coherence_factor,
    merge_dsaft,
    merge_fasaft,
    run_saft,
)

PSF = PsfModel()
GEO = AcquisitionGeometry()
PITCH = GEO.dx
DIMS = (121, 121, 64)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def _um(v):
    return f"{v * 1e6:.1f} um" if math.isfinite(v) else "unresolved"


# --- 1 ---------------------------------------------------------------------------

def test_criterion_01_fasaft_degenerates_to_dsaft(report):
    t = time.perf_counter()
    devs = []
    for seed in range(4):
        rng = np.random.default_rng(seed)
        shape = (16 + seed, 18, 10)
        stack = DirectionalStack.uniform([rng.normal(size=shape) for _ in range(8)])
        fa = merge_fasaft(stack, SaftConfig(gamma=0.0, epsilon_d=0.0))
        ds = merge_dsaft(stack)
        devs.append(float(np.max(np.abs(fa / np.max(np.abs(fa)) - ds / np.max(np.abs(ds))))))
    elapsed = time.perf_counter() - t
    ok = max(devs) <= 1e-6 and elapsed < 10
    report(1, ok, f"max deviation {max(devs):.2e} over {len(devs)} volumes, {elapsed:.2f} s")
    assert ok


# --- 2 ---------------------------------------------------------------------------

def test_criterion_02_window_partition_of_unity(report):
    t = time.perf_counter()
    worst, dc_exact = 0.0, True
    for n in (1, 2, 4, 16):
        for shape in ((121, 121), (64, 64), (33, 48)):
            w = build_windows(shape, n, 0.0)
            worst = max(worst, float(np.max(np.abs(w.sum(axis=0) - 1.0))))
            cu, cv = spectrum_center(shape)
            dc_exact &= bool(np.all(w[:, cu, cv] == 1.0 / n))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-9 and dc_exact and elapsed < 1
    report(2, ok, f"max |sum W - 1| = {worst:.1e}, DC exact: {dc_exact}, {elapsed:.2f} s")
    assert ok


# --- 3 ---------------------------------------------------------------------------

def test_criterion_03_coherence_factor_bounds(report):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    sets = rng.normal(size=(9, 10_000)) * rng.uniform(0.01, 100, size=10_000)
    cf = coherence_factor(sets)
    in_bounds = bool(np.all((cf >= 0) & (cf <= 1)))
    a = rng.uniform(0.1, 10, size=1000)
    equal = coherence_factor(np.tile(a, (5, 1)))
    cancel = coherence_factor(np.vstack([a, -a]))
    elapsed = time.perf_counter() - t
    ok = (in_bounds and np.max(np.abs(equal - 1)) <= 1e-12 and np.max(cancel) <= 1e-12
          and elapsed < 1)
    report(3, ok, f"bounds {in_bounds}, equal dev {np.max(np.abs(equal - 1)):.1e}, "
                  f"cancel {np.max(cancel):.1e}, {elapsed:.2f} s")
    assert ok


# --- 4 ---------------------------------------------------------------------------

def _lattice_two_sparse(y, H, lam, top=1.5, step=1e-3):
    n = len(y)
    cols = np.column_stack([H.apply(e) for e in np.eye(n)])
    grid = np.arange(0.0, top + step / 2, step)
    a, b = grid[:, None], grid[None, :]
    best, best_x = math.inf, None
    for i, j in itertools.combinations(range(n), 2):
        hi, hj = cols[:, i], cols[:, j]
        f = 0.5 * (y @ y - 2 * a * (y @ hi) - 2 * b * (y @ hj) + a * a * (hi @ hi)
                   + 2 * a * b * (hi @ hj) + b * b * (hj @ hj)) + lam * (a + b)
        k = np.unravel_index(np.argmin(f), f.shape)
        if f[k] < best:
            best = f[k]
            best_x = np.zeros(n)
            best_x[i], best_x[j] = grid[k[0]], grid[k[1]]
    return best_x


def test_criterion_04_fista_oracles(report):
    t = time.perf_counter()
    rng = np.random.default_rng(11)
    ident = ConvolutionDictionary.identity()
    id_err = 0.0
    for _ in range(50):
        y = rng.normal(size=20)
        lam = rng.uniform(0, 1.5)
        x = fista_l1(y, ident, lam=lam, iterations=200, nonneg=False)
        id_err = max(id_err, float(np.max(np.abs(x - np.sign(y) * np.maximum(np.abs(y) - lam, 0)))))
    for y, lam, want in (([1.0], 0.4, 0.6), ([0.2], 0.5, 0.0)):
        x = fista_l1(np.array(y), ident, lam=lam, iterations=200)
        id_err = max(id_err, abs(float(x[0]) - want))

    H = ConvolutionDictionary([np.array([0.25, 0.5, 0.25])], (0,))
    lat_err = 0.0
    # instances whose l1 minimiser is 2-sparse (the lattice search domain)
    for spikes in ({0: 0.8, 4: 1.2}, {2: 1.0, 3: 0.7}, {0: 1.0, 1: 0.6}, {1: 1.0, 4: 0.8},
                   {0: 1.0, 3: 0.5}):
        xt = np.zeros(5)
        for k, v in spikes.items():
            xt[k] = v
        y = H.apply(xt)
        x = fista_l1(y, H, lam=0.01, iterations=20000, tol=0.0)
        lat_err = max(lat_err, float(np.max(np.abs(x - _lattice_two_sparse(y, H, 0.01)))))

    grad_err = 0.0
    for _ in range(20):
        G = ConvolutionDictionary([gaussian_kernel(rng.uniform(1, 5))], (0,))
        x, y = rng.normal(size=16), rng.normal(size=16)
        g = G.gradient(x, y)
        h = 1e-6
        fd = np.array([(l1_objective(x + h * e, y, G, 0) - l1_objective(x - h * e, y, G, 0)) / (2 * h)
                       for e in np.eye(16)])
        grad_err = max(grad_err, float(np.linalg.norm(g - fd) / np.linalg.norm(g)))
    elapsed = time.perf_counter() - t
    ok = id_err <= 1e-6 and lat_err <= 1e-3 and grad_err <= 1e-5 and elapsed < 30
    report(4, ok, f"identity {id_err:.1e}, lattice {lat_err:.1e}, gradient {grad_err:.1e}, "
                  f"{elapsed:.1f} s")
    assert ok


# --- 5 ---------------------------------------------------------------------------

def test_criterion_05_richardson_lucy(report):
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    img = rng.random((30, 30))
    delta = (np.array([1.0]), np.array([1.0]))
    identity = bool(np.array_equal(richardson_lucy(LateralImage(img, 1, 1), delta, 1).pixels, img))
    nonneg = True
    for seed in range(10):
        x = np.random.default_rng(seed).random((24, 24)) ** 2
        est = LateralImage(x, PITCH, PITCH)
        for it in range(1, 16):
            nonneg &= bool(np.all(richardson_lucy(est, PSF, it).pixels >= 0))
    flux = 0.0
    for seed in range(5):
        x = np.zeros((48, 48))
        x[14:34, 14:34] = np.random.default_rng(seed).random((20, 20))
        k = gaussian_kernel(PSF.fwhm_focus / PITCH)
        blurred = ndimage.convolve1d(ndimage.convolve1d(x, k, axis=0, mode="constant"), k, axis=1,
                                     mode="constant")
        out = richardson_lucy(LateralImage(blurred, PITCH, PITCH), PSF, 15).pixels
        flux = max(flux, abs(out.sum() / blurred.sum() - 1))
    elapsed = time.perf_counter() - t
    ok = identity and nonneg and flux <= 0.01 and elapsed < 10
    report(5, ok, f"delta identity {identity}, nonneg {nonneg}, flux error {flux:.1e}, "
                  f"{elapsed:.1f} s")
    assert ok


# --- 6 ---------------------------------------------------------------------------

def _crossed_maps(z_off):
    geo = GEO.with_t0_for_depth(GEO.focal_length + z_off, 8)
    vol = simulate(crossed_wires(z_off, 1.2e-3), geo, PSF, DIMS)
    stack = build_stack(vol, SaftConfig(), PSF)
    ds = map_projection(vol.with_samples(merge_dsaft(stack)))
    fa = map_projection(vol.with_samples(merge_fasaft(stack, SaftConfig())))
    rl = richardson_lucy(fa, PSF, 15)
    dmb = dmb_deconvolve(fa, PSF, DeconvConfig(n_phases=4))
    return {"raw": map_projection(vol), "dsaft": ds, "fasaft": fa, "rl": rl, "dmb": dmb}


def test_criterion_06_defocus_recovery(report):
    t = time.perf_counter()
    # profile across the first wire, 0.45 mm from the crossing
    centre = (0.45e-3 * math.cos(math.pi / 4), 0.45e-3 * math.sin(math.pi / 4))
    rows, ok = [], True
    raw_prev = 0.0
    strict = True
    for z in (0.3e-3, 0.6e-3, 0.9e-3):
        maps = _crossed_maps(z)
        w = {k: fwhm_across(v, centre, 3 * math.pi / 4, 0.6e-3) for k, v in maps.items()}
        ok &= w["raw"] > raw_prev
        raw_prev = w["raw"]
        if z >= 0.6e-3:
            ok &= w["fasaft"] <= w["raw"] / 3
        ok &= w["dmb"] < w["rl"] <= w["fasaft"] < w["dsaft"] <= w["raw"]
        ok &= w["dmb"] <= 1.2 * PSF.fwhm_focus
        strict &= w["dmb"] <= 0.6 * PSF.fwhm_focus
        rows.append(f"z_off {z * 1e3:.1f} mm: " + ", ".join(f"{k} {_um(v)}" for k, v in w.items()))
    elapsed = time.perf_counter() - t
    ok &= elapsed < 300
    report(6, ok, "; ".join(rows) + f"; D-MB <= 0.6 PSF (informative): {strict}; "
                                    f"{elapsed:.0f} s")
    assert ok


# --- 7 / 8 -------------------------------------------------------------------------

RES_ZOFF = -0.45e-3
RES_SCENE = converging_wires(RES_ZOFF, 1.4e-3, 0.6e-3)


def _resolvability(psnr=math.inf, seed=7):
    geo = GEO.with_t0_for_depth(GEO.focal_length + RES_ZOFF, 56)
    vol = simulate(RES_SCENE, geo, PSF, DIMS)
    if math.isfinite(psnr):
        vol = add_noise(vol, NoiseSpec(psnr, seed))
    raw = map_projection(vol)
    fa = map_projection(run_saft(vol, SaftConfig(), PSF))
    dmb = dmb_deconvolve(fa, PSF, DeconvConfig(n_phases=4))
    return raw, fa, dmb


def _resolvability_gate(raw, dmb):
    d_raw = min_resolvable_distance(raw, RES_SCENE)
    d_dmb = min_resolvable_distance(dmb, RES_SCENE)
    gain = d_raw / d_dmb if math.isfinite(d_dmb) else 0.0
    ok = (d_dmb <= 0.8 * PSF.fwhm_focus and d_raw >= 1.5 * PSF.fwhm_focus and gain >= 1.8)
    return ok, d_raw, d_dmb, gain


def test_criterion_07_resolvability(report):
    t = time.perf_counter()
    raw, fa, dmb = _resolvability()
    ok, d_raw, d_dmb, gain = _resolvability_gate(raw, dmb)
    d_fa = min_resolvable_distance(fa, RES_SCENE)
    d_rl = min_resolvable_distance(richardson_lucy(fa, PSF, 15), RES_SCENE)
    elapsed = time.perf_counter() - t
    ok &= elapsed < 300
    report(7, ok, f"raw {_um(d_raw)} (>= {_um(1.5 * PSF.fwhm_focus)}), FA-SAFT {_um(d_fa)}, "
                  f"R-L {_um(d_rl)}, D-MB {_um(d_dmb)} (<= {_um(0.8 * PSF.fwhm_focus)}), "
                  f"gain {gain:.2f}x (>= 1.8), {elapsed:.0f} s")
    assert ok


def test_criterion_08_noise_robustness(report):
    t = time.perf_counter()
    raw, _, dmb = _resolvability(20.0)
    gate, d_raw, d_dmb, gain = _resolvability_gate(raw, dmb)
    raw14, fa14, dmb14 = _resolvability(14.0)
    finite = all(bool(np.all(np.isfinite(m.pixels))) for m in (raw14, fa14, dmb14))
    try:
        d14 = _um(min_resolvable_distance(dmb14, RES_SCENE))
        graceful = True
    except Exception as exc:  # any exception here is a non-graceful failure
        d14, graceful = f"error {exc}", False
    elapsed = time.perf_counter() - t
    ok = gate and finite and graceful and elapsed < 300
    report(8, ok, f"20 dB: raw {_um(d_raw)}, D-MB {_um(d_dmb)}, gain {gain:.2f}x, gate {gate}; "
                  f"14 dB: finite {finite}, D-MB {d14}; {elapsed:.0f} s")
    assert ok


# --- 9 ---------------------------------------------------------------------------

def _maxima_near_centre(img: LateralImage, radius):
    p = img.pixels
    peak = p.max()
    m = ndimage.maximum_filter(p, size=3, mode="constant")
    idx = np.argwhere((p == m) & (p > 0.5 * peak))
    c = (np.array(p.shape) - 1) / 2
    dist = np.hypot(*((idx - c) * np.array([img.dx, img.dy])).T)
    return int(np.sum(dist <= radius))


def test_criterion_09_point_preservation(report):
    radius = 2 * PSF.w0
    counts = {}
    geo = GEO.with_t0_for_depth(GEO.focal_length, 16)
    vol = simulate(SceneSpec((Point(0, 0, 0, 1.0),)), geo, PSF, (61, 61, 32))
    counts["in focus"] = _maxima_near_centre(
        dmb_deconvolve(map_projection(vol), PSF, DeconvConfig(n_phases=4)), radius)
    z = 0.3e-3
    geo = GEO.with_t0_for_depth(GEO.focal_length + z, 8)
    vol = simulate(SceneSpec((Point(0, 0, z, 1.0),)), geo, PSF, (61, 61, 48))
    fa = map_projection(run_saft(vol, SaftConfig(), PSF))
    counts["0.3 mm + FA-SAFT"] = _maxima_near_centre(
        dmb_deconvolve(fa, PSF, DeconvConfig(n_phases=4)), radius)
    ok = all(c == 1 for c in counts.values())
    report(9, ok, ", ".join(f"{k}: {v} maxima" for k, v in counts.items()))
    assert ok


# --- 10 --------------------------------------------------------------------------

def test_criterion_10_performance(report):
    geo = GEO.with_t0_for_depth(GEO.focal_length + 0.05e-3, 10)
    vol = simulate(crossed_wires(0.05e-3, 0.8e-3), geo, PSF, (121, 121, 30))
    t = time.perf_counter()
    fa = map_projection(run_saft(vol, SaftConfig(n_directions=16), PSF))
    t_saft = time.perf_counter() - t

    def timed(m):
        w0, c0 = time.perf_counter(), time.process_time()
        dmb_deconvolve(fa, PSF, DeconvConfig(n_phases=m))
        return time.perf_counter() - w0, time.process_time() - c0
    # wall time for the envelope; process CPU time (best of three) for the
    # scaling ratio, which other load on a shared machine does not inflate
    runs4 = [timed(4) for _ in range(3)]
    runs8 = [timed(8) for _ in range(3)]
    t4 = min(w for w, _ in runs4)
    ratio = min(c for _, c in runs8) / min(c for _, c in runs4)
    ratio_ok = abs(ratio - 2.0) <= 0.3 * 2.0
    envelope = t_saft <= 75 and t4 <= 10
    report(10, ratio_ok, f"FA-SAFT 121x121x30 N'=16 {t_saft:.1f} s (<= 75 s), D-MB M=4 {t4:.1f} s "
                         f"(<= 10 s) [envelope informative: {'met' if envelope else 'missed'}]; "
                         f"M=8/M=4 CPU-time ratio {ratio:.2f} (2 +- 30%)")
    assert ratio_ok


# --- 11 --------------------------------------------------------------------------

LEAF_PITCH = 7.5e-6
LEAF_N = 201


def _leaf():
    """Midrib with three pairs of side veins; profile points across each."""
    segs = [LineSegment(-0.6e-3, 0, 0.6e-3, 0, 0, 1.0)]
    probes = [((0.45e-3, 0.0), math.pi / 2)]
    for x0 in (-0.4e-3, -0.1e-3, 0.2e-3):
        for sgn in (1, -1):
            a = sgn * math.radians(50)
            segs.append(LineSegment(x0, 0, x0 + 0.4e-3 * math.cos(a), 0.4e-3 * math.sin(a), 0, 0.8))
            probes.append(((x0 + 0.25e-3 * math.cos(a), 0.25e-3 * math.sin(a)), a + math.pi / 2))
    return segs, probes


def _placed(angle):
    c, s = math.cos(angle), math.sin(angle)

    def rot(p):
        return (c * p[0] - s * p[1], s * p[0] + c * p[1])
    segs, probes = _leaf()
    scene = SceneSpec(tuple(LineSegment(*rot((l.x1, l.y1)), *rot((l.x2, l.y2)), l.z_off, l.amplitude)
                            for l in segs))
    return scene, [(rot(p), d + angle) for p, d in probes]


def test_criterion_11_rotation_robustness(report):
    base = math.radians(20)
    widths = []
    for angle in (base, base + math.pi / 4):
        scene, probes = _placed(angle)
        img = LateralImage(render_lateral(scene, (LEAF_N, LEAF_N), LEAF_PITCH, LEAF_PITCH,
                                          PSF.fwhm_focus), LEAF_PITCH, LEAF_PITCH)
        out = dmb_deconvolve(img, PSF, DeconvConfig(n_phases=4))
        # profiles are taken at the geometrically mapped points, i.e. in the
        # frame of the unrotated scene
        widths.append([fwhm_across(out, p, d, 0.08e-3) for p, d in probes])
    dev = [abs(b / a - 1) for a, b in zip(*widths)]
    ok = max(dev) <= 0.05
    report(11, ok, f"{len(dev)} matched profiles, max FWHM deviation {max(dev) * 100:.1f}% (<= 5%), "
                   f"widths {', '.join(f'{w * 1e6:.1f}' for w in widths[0])} um")
    assert ok
