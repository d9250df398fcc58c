"""Synthetic AR-PAM acquisitions of points and wires.

The forward model is phenomenological. Each absorber at out-of-focus
distance ``z_off`` is seen by the A-line at lateral distance ``d`` with
amplitude ``exp(-ln2 * d**2 / w(z_off)**2)`` (so the lateral FWHM is
``2 * w``) and arrives at the virtual-point-detector time

    t = (z_f + sgn(z_off) * sqrt(d**2 + z_off**2)) / c

as a bipolar first-derivative-of-Gaussian pulse of width ``4 * dt``.
Wires are integrated as dense chains of points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from arpam.core import AcquisitionGeometry, LateralImage, PsfModel, RfVolume, lateral_coords

PULSE_WIDTH_SAMPLES = 4.0  # full duration (+-2 sigma) in samples
_PULSE_SUPPORT = 5.0  # in pulse sigmas


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z_off: float
    amplitude: float = 1.0


@dataclass(frozen=True)
class LineSegment:
    x1: float
    y1: float
    x2: float
    y2: float
    z_off: float
    amplitude: float = 1.0

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)


Absorber = Union[Point, LineSegment]


@dataclass(frozen=True)
class SceneSpec:
    absorbers: Tuple[Absorber, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "absorbers", tuple(self.absorbers))
        for a in self.absorbers:
            if not a.amplitude > 0:
                raise SceneError("absorber amplitude must be positive")

    def __add__(self, other: "SceneSpec") -> "SceneSpec":
        return SceneSpec(self.absorbers + other.absorbers)

    def shifted(self, dx: float, dy: float) -> "SceneSpec":
        out = []
        for a in self.absorbers:
            if isinstance(a, Point):
                out.append(Point(a.x + dx, a.y + dy, a.z_off, a.amplitude))
            else:
                out.append(LineSegment(a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy,
                                       a.z_off, a.amplitude))
        return SceneSpec(tuple(out))


@dataclass(frozen=True)
class NoiseSpec:
    """White Gaussian noise at a peak-signal-to-noise ratio (dB).

    ``target_psnr = inf`` disables the noise.
    """

    target_psnr: float
    seed: int = 0


# --- scene files ---------------------------------------------------------------

def parse_scene(text: str) -> SceneSpec:
    """Parse ``POINT x y zoff amp`` / ``LINE x1 y1 x2 y2 zoff amp`` lines (SI units)."""
    absorbers: List[Absorber] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *fields = line.split()
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise SceneError(f"line {lineno}: non-numeric field in {raw.strip()!r}") from None
        kind = kind.upper()
        if kind == "POINT" and len(values) == 4:
            absorbers.append(Point(*values))
        elif kind == "LINE" and len(values) == 6:
            absorbers.append(LineSegment(*values))
        else:
            raise SceneError(f"line {lineno}: cannot parse {raw.strip()!r}")
        if not absorbers[-1].amplitude > 0:
            raise SceneError(f"line {lineno}: amplitude must be positive")
    return SceneSpec(tuple(absorbers))


def load_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text())


def format_scene(scene: SceneSpec) -> str:
    rows = []
    for a in scene.absorbers:
        if isinstance(a, Point):
            rows.append(f"POINT {a.x!r} {a.y!r} {a.z_off!r} {a.amplitude!r}")
        else:
            rows.append(f"LINE {a.x1!r} {a.y1!r} {a.x2!r} {a.y2!r} {a.z_off!r} {a.amplitude!r}")
    return "\n".join(rows) + ("\n" if rows else "")


# --- forward model -------------------------------------------------------------

def pulse(tau, sigma):
    """Unit-peak first derivative of a Gaussian (bipolar, zero mean)."""
    u = np.asarray(tau, dtype=float) / sigma
    return -u * np.exp(0.5 - 0.5 * u * u)


def _point_sources(absorber: Absorber, step: float, w0: float):
    if isinstance(absorber, Point):
        return np.array([[absorber.x, absorber.y]]), np.array([absorber.amplitude])
    length = absorber.length
    if length == 0.0:
        return np.array([[absorber.x1, absorber.y1]]), np.array([absorber.amplitude])
    n = int(math.ceil(length / step)) + 1
    s = np.linspace(0.0, 1.0, n)
    xy = np.column_stack([absorber.x1 + s * (absorber.x2 - absorber.x1),
                          absorber.y1 + s * (absorber.y2 - absorber.y1)])
    h = length / (n - 1)
    wts = np.full(n, h)
    wts[[0, -1]] *= 0.5
    # amplitude is the in-focus peak of an infinite wire
    wts *= absorber.amplitude / (w0 * math.sqrt(math.pi / math.log(2.0)))
    return xy, wts


def _check_extent(scene: SceneSpec, xs, ys, geometry, nt):
    tol = 1e-12
    x_lo, x_hi, y_lo, y_hi = xs[0] - tol, xs[-1] + tol, ys[0] - tol, ys[-1] + tol
    for a in scene.absorbers:
        pts = [(a.x, a.y)] if isinstance(a, Point) else [(a.x1, a.y1), (a.x2, a.y2)]
        for px, py in pts:
            if not (x_lo <= px <= x_hi and y_lo <= py <= y_hi):
                raise SceneError("absorber out of field")
        it = (geometry.focal_length + a.z_off) / geometry.sound_speed
        it = (it - geometry.t0) / geometry.dt
        if not (0 <= it <= nt - 1):
            raise SceneError("absorber out of field")


def simulate(scene: SceneSpec, geometry: AcquisitionGeometry, psf: PsfModel,
             dims: Sequence[int]) -> RfVolume:
    """Render ``scene`` into an RF volume of shape ``dims = (nx, ny, nt)``."""
    nx, ny, nt = (int(d) for d in dims)
    if min(nx, ny, nt) <= 0:
        raise ValueError("dims must be positive")
    xs, ys = lateral_coords(nx, geometry.dx), lateral_coords(ny, geometry.dy)
    _check_extent(scene, xs, ys, geometry, nt)

    sigma = PULSE_WIDTH_SAMPLES * geometry.dt / 4.0
    half = int(math.ceil(_PULSE_SUPPORT * sigma / geometry.dt))
    taps = np.arange(2 * half + 2)
    pad = 2 * half + 2
    buf = np.zeros((nx, ny, nt + 2 * pad))
    step = min(geometry.dx, geometry.dy) / 2.0
    c, zf = geometry.sound_speed, geometry.focal_length
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    for absorber in scene.absorbers:
        z_off = absorber.z_off
        w = float(psf.beam_radius(z_off))
        sgn = float(np.sign(z_off))
        sources, amps = _point_sources(absorber, step, psf.w0)
        for (sx, sy), amp in zip(sources, amps):
            d2 = (gx - sx) ** 2 + (gy - sy) ** 2
            wgt = amp * np.exp(-math.log(2.0) * d2 / (w * w))
            f = ((zf + sgn * np.sqrt(d2 + z_off * z_off)) / c - geometry.t0) / geometry.dt
            start = np.floor(f).astype(np.int64) - half
            active = (wgt > 1e-12 * amp) & (start + taps[-1] >= 0) & (start < nt)
            if not np.any(active):
                continue
            ix, iy = np.nonzero(active)
            st, ff, ww = start[active], f[active], wgt[active]
            idx = st[:, None] + taps[None, :]
            vals = ww[:, None] * pulse((idx - ff[:, None]) * geometry.dt, sigma)
            buf[ix[:, None], iy[:, None], idx + pad] += vals
    return RfVolume(geometry, buf[:, :, pad:pad + nt])


def noise_sigma(peak: float, target_psnr: float) -> float:
    return 0.0 if math.isinf(target_psnr) else peak / 10.0 ** (target_psnr / 20.0)


def add_noise(vol: RfVolume, noise: NoiseSpec) -> RfVolume:
    """Add white Gaussian noise to every A-line at ``noise.target_psnr``."""
    peak = float(np.max(np.abs(vol.samples)))
    if peak == 0.0:
        raise ValueError("cannot set PSNR on zero signal")
    sigma = noise_sigma(peak, noise.target_psnr)
    if sigma == 0.0:
        return vol
    rng = np.random.default_rng(noise.seed)
    return vol.with_samples(vol.samples + rng.normal(0.0, sigma, vol.dims))


def add_noise_map(img: LateralImage, noise: NoiseSpec) -> LateralImage:
    """2D variant: noise added to a MAP image, re-rectified afterwards."""
    peak = float(np.max(img.pixels))
    if peak == 0.0:
        raise ValueError("cannot set PSNR on zero signal")
    sigma = noise_sigma(peak, noise.target_psnr)
    if sigma == 0.0:
        return img
    rng = np.random.default_rng(noise.seed)
    return img.with_pixels(np.abs(img.pixels + rng.normal(0.0, sigma, img.dims)))


# --- canned scenes -------------------------------------------------------------

def crossed_wires(z_off: float, half_length: float, angle: float = math.pi / 4,
                  center=(0.0, 0.0), amplitude: float = 1.0) -> SceneSpec:
    """Two perpendicular wires crossing at ``center``, the first at ``angle``."""
    cx, cy = center
    out = []
    for a in (angle, angle + math.pi / 2):
        ux, uy = math.cos(a) * half_length, math.sin(a) * half_length
        out.append(LineSegment(cx - ux, cy - uy, cx + ux, cy + uy, z_off, amplitude))
    return SceneSpec(tuple(out))


def converging_wires(z_off: float, length: float, max_separation: float,
                     direction: float = 0.0, center=(0.0, 0.0),
                     amplitude: float = 1.0) -> SceneSpec:
    """Two wires meeting at one end and ``max_separation`` apart at the other.

    The bisector runs along ``direction`` through ``center``; the meeting
    point is at ``center - length/2 * e_dir``.
    """
    cx, cy = center
    ex, ey = math.cos(direction), math.sin(direction)
    nx_, ny_ = -ey, ex
    ax_, ay_ = cx - 0.5 * length * ex, cy - 0.5 * length * ey
    bx, by = cx + 0.5 * length * ex, cy + 0.5 * length * ey
    h = 0.5 * max_separation
    return SceneSpec((
        LineSegment(ax_, ay_, bx + h * nx_, by + h * ny_, z_off, amplitude),
        LineSegment(ax_, ay_, bx - h * nx_, by - h * ny_, z_off, amplitude),
    ))


def lines_from_scene(scene: SceneSpec) -> List[LineSegment]:
    return [a for a in scene.absorbers if isinstance(a, LineSegment)]


def render_lateral(scene: SceneSpec, shape, dx: float, dy: float,
                   fwhm: float) -> np.ndarray:
    """In-focus 2D rendering (Gaussian blur of FWHM ``fwhm``) of a scene.

    Used to build MAP-like test images without a full RF simulation.
    """
    xs, ys = lateral_coords(shape[0], dx), lateral_coords(shape[1], dy)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    w = fwhm / 2.0
    img = np.zeros(shape)
    step = min(dx, dy) / 2.0
    for a in scene.absorbers:
        pts, amps = _point_sources(a, step, w)
        for (sx, sy), amp in zip(pts, amps):
            img += amp * np.exp(-math.log(2.0) * ((gx - sx) ** 2 + (gy - sy) ** 2) / (w * w))
    return img
