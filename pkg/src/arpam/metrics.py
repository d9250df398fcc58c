"""Image-quality measurements: line profiles, FWHM, SNR and the two-wire
minimum resolvable distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from arpam.core import LateralImage
from arpam.phantom import LineSegment, SceneSpec, lines_from_scene

UNRESOLVED = math.inf


@dataclass(frozen=True, eq=False)
class Profile1D:
    positions: np.ndarray
    values: np.ndarray
    p0: Tuple[float, float]
    p1: Tuple[float, float]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        val = np.asarray(self.values, dtype=float)
        if pos.shape != val.shape or pos.ndim != 1:
            raise ValueError("positions and values must be matching 1D arrays")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("profile positions must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("profile values must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", val)


def _to_index(img: LateralImage, point):
    nx, ny = img.dims
    return point[0] / img.dx + (nx - 1) / 2.0, point[1] / img.dy + (ny - 1) / 2.0


def _inside(img: LateralImage, idx, tol=1e-9):
    nx, ny = img.dims
    return -tol <= idx[0] <= nx - 1 + tol and -tol <= idx[1] <= ny - 1 + tol


def extract_profile(img: LateralImage, p0, p1, step: Optional[float] = None) -> Profile1D:
    """Bilinear samples along the segment ``p0 -> p1`` (centred metres).

    Sampling pitch defaults to ``min(dx, dy) / 2``.
    """
    i0, i1 = _to_index(img, p0), _to_index(img, p1)
    if not (_inside(img, i0) and _inside(img, i1)):
        raise ValueError("profile out of bounds")
    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    if length == 0:
        raise ValueError("degenerate profile")
    step = min(img.dx, img.dy) / 2.0 if step is None else step
    n = int(math.floor(length / step + 1e-9)) + 1
    s = np.arange(n) * step
    frac = s / length
    rows = i0[0] + frac * (i1[0] - i0[0])
    cols = i0[1] + frac * (i1[1] - i0[1])
    nx, ny = img.dims
    coords = np.vstack([np.clip(rows, 0, nx - 1), np.clip(cols, 0, ny - 1)])
    vals = ndimage.map_coordinates(img.pixels, coords, order=1, mode="nearest")
    return Profile1D(s, vals, tuple(p0), tuple(p1))


def _peak_value(v, i):
    # 3-point parabolic refinement of the sampled maximum
    a, b, c = v[i - 1], v[i], v[i + 1]
    den = a - 2 * b + c
    if den >= 0:
        return b
    return b - 0.25 * (a - c) ** 2 / den


def fwhm(profile: Profile1D) -> float:
    """Width between the half-maximum crossings nearest the global peak."""
    v, x = profile.values, profile.positions
    i = int(np.argmax(v))
    if i == 0 or i == len(v) - 1:
        raise ValueError("peak truncated")
    if np.count_nonzero(v == v[i]) > 1 and not (v[i - 1] == v[i] or v[i + 1] == v[i]):
        raise ValueError("profile has no unique maximum")
    half = 0.5 * _peak_value(v, i)
    left = i
    while left > 0 and v[left - 1] >= half:
        left -= 1
    if left == 0:
        raise ValueError("peak truncated")
    right = i
    while right < len(v) - 1 and v[right + 1] >= half:
        right += 1
    if right == len(v) - 1:
        raise ValueError("peak truncated")

    def cross(ia, ib):
        va, vb = v[ia], v[ib]
        return x[ia] + (half - va) * (x[ib] - x[ia]) / (vb - va)

    return cross(right, right + 1) - cross(left - 1, left)


def fwhm_across(img: LateralImage, center, direction: float, half_length: float) -> float:
    """FWHM of the profile through ``center`` along ``direction`` (radians)."""
    ex, ey = math.cos(direction), math.sin(direction)
    p0 = (center[0] - half_length * ex, center[1] - half_length * ey)
    p1 = (center[0] + half_length * ex, center[1] + half_length * ey)
    return fwhm(extract_profile(img, p0, p1))


def _region_mask(shape, region):
    if region is None:
        return None
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != shape:
            raise ValueError("region mask shape mismatch")
        return region
    mask = np.zeros(shape, dtype=bool)
    mask[region] = True
    return mask


def border_mask(shape, fraction: float = 0.1) -> np.ndarray:
    """Frame of width ``fraction`` of each dimension (at least one pixel)."""
    mask = np.zeros(shape, dtype=bool)
    bx, by = max(1, int(shape[0] * fraction)), max(1, int(shape[1] * fraction))
    mask[:bx, :] = mask[-bx:, :] = True
    mask[:, :by] = mask[:, -by:] = True
    return mask


def snr_db(img, signal_region=None, background_region=None) -> float:
    """20 log10(max over signal / std over background).

    Regions are boolean masks or index expressions (slices). The
    background defaults to the outer 10% frame, the signal to everything
    else.
    """
    pixels = img.pixels if isinstance(img, LateralImage) else np.asarray(img, dtype=float)
    bg = _region_mask(pixels.shape, background_region)
    if bg is None:
        bg = border_mask(pixels.shape)
    sig = _region_mask(pixels.shape, signal_region)
    if sig is None:
        sig = ~bg
    if not sig.any() or not bg.any():
        raise ValueError("signal and background regions must be nonempty")
    if np.any(sig & bg):
        raise ValueError("signal and background regions must be disjoint")
    sd = float(np.std(pixels[bg]))
    if sd == 0.0:
        raise ValueError("degenerate background")
    peak = float(np.max(pixels[sig]))
    if peak <= 0.0:
        raise ValueError("signal region has no positive amplitude")
    return 20.0 * math.log10(peak / sd)


# --- two-wire resolvability ---------------------------------------------------

def two_peak_contrast_db(values, center_index: int, min_peak_fraction: float = 0.25) -> float:
    """Contrast (dB) between the weaker of two side peaks and the valley.

    One peak is sought on each side of ``center_index`` (the bisector);
    each must be a strict interior local maximum of at least
    ``min_peak_fraction`` of the profile maximum. Returns ``-inf`` when a
    side has no qualifying peak and ``inf`` when the valley is zero.
    """
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n < 5:
        return -math.inf
    top = float(np.max(v))
    if top <= 0:
        return -math.inf
    interior = np.zeros(n, dtype=bool)
    interior[1:-1] = (v[1:-1] > v[:-2]) & (v[1:-1] >= v[2:])
    interior &= v >= min_peak_fraction * top
    idx = np.arange(n)
    left = idx[interior & (idx < center_index)]
    right = idx[interior & (idx > center_index)]
    if left.size == 0 or right.size == 0:
        return -math.inf
    il = left[np.argmax(v[left])]
    ir = right[np.argmax(v[right])]
    valley = float(np.min(v[il:ir + 1]))
    weaker = min(v[il], v[ir])
    if valley <= 0:
        return math.inf
    return 20.0 * math.log10(weaker / valley)


@dataclass(frozen=True)
class _WireGeometry:
    vertex: np.ndarray
    bisector: np.ndarray
    normal: np.ndarray
    tan_half: float
    s_max: float


def _wire_geometry(wires) -> _WireGeometry:
    if isinstance(wires, SceneSpec):
        wires = lines_from_scene(wires)
    wires = list(wires)
    if len(wires) != 2 or not all(isinstance(w, LineSegment) for w in wires):
        raise ValueError("resolvability needs exactly two line segments")
    a0, a1 = np.array([wires[0].x1, wires[0].y1]), np.array([wires[0].x2, wires[0].y2])
    b0, b1 = np.array([wires[1].x1, wires[1].y1]), np.array([wires[1].x2, wires[1].y2])
    da, db = a1 - a0, b1 - b0
    cross = da[0] * db[1] - da[1] * db[0]
    if abs(cross) < 1e-18:
        raise ValueError("wires are parallel; no convergence point")
    t = ((b0[0] - a0[0]) * db[1] - (b0[1] - a0[1]) * db[0]) / cross
    vertex = a0 + t * da
    ends = []
    for p, q in ((a0, a1), (b0, b1)):
        far = p if np.linalg.norm(p - vertex) > np.linalg.norm(q - vertex) else q
        ends.append(far)
    ea = (ends[0] - vertex) / np.linalg.norm(ends[0] - vertex)
    eb = (ends[1] - vertex) / np.linalg.norm(ends[1] - vertex)
    e = ea + eb
    e /= np.linalg.norm(e)
    half = 0.5 * math.acos(float(np.clip(ea @ eb, -1.0, 1.0)))
    s_max = min(float((ends[0] - vertex) @ e), float((ends[1] - vertex) @ e))
    return _WireGeometry(vertex, e, np.array([-e[1], e[0]]), math.tan(half), s_max)


def resolvability_scan(img: LateralImage, wires, min_halfwidth: Optional[float] = None,
                       step: Optional[float] = None, min_peak_fraction: float = 0.25,
                       end_margin: Optional[float] = None):
    """Two-peak contrast along the wires, from the widest separation inward.

    Returns ``(separations, contrasts_db)`` ordered from wide to narrow.
    """
    geo = _wire_geometry(wires)
    pitch = min(img.dx, img.dy)
    step = pitch / 2.0 if step is None else step
    min_halfwidth = 5 * pitch if min_halfwidth is None else min_halfwidth
    end_margin = 3 * pitch if end_margin is None else end_margin
    seps, contrasts = [], []
    s = geo.s_max - end_margin
    while s > 0.5 * step:
        sep = 2.0 * s * geo.tan_half
        half = max(sep, min_halfwidth)
        mid = geo.vertex + s * geo.bisector
        p0, p1 = mid - half * geo.normal, mid + half * geo.normal
        if _inside(img, _to_index(img, p0)) and _inside(img, _to_index(img, p1)):
            prof = extract_profile(img, tuple(p0), tuple(p1),
                                   step=min(step, max(sep / 4, pitch / 8)))
            center = int(np.argmin(np.abs(prof.positions - half)))
            seps.append(sep)
            contrasts.append(two_peak_contrast_db(prof.values, center, min_peak_fraction))
        s -= step
    return np.array(seps), np.array(contrasts)


def min_resolvable_distance(img: LateralImage, wires, criterion_db: float = 6.0,
                            **scan_kw) -> float:
    """Smallest wire separation still resolved at ``criterion_db``.

    Separations are scanned from the widest inward; the result is the
    last separation of the resolved run that starts at the widest one.
    Returns :data:`UNRESOLVED` (``inf``) if the widest is not resolved.
    """
    seps, contrasts = resolvability_scan(img, wires, **scan_kw)
    ok = contrasts >= criterion_db
    if seps.size == 0 or not ok[0]:
        return UNRESOLVED
    first_fail = np.argmin(ok) if not ok.all() else len(ok)
    return float(seps[first_fail - 1])
