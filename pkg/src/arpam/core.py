"""Domain types, configuration records and grid conversions.

Everything here is immutable after construction. Volumes are indexed
``[ix, iy, it]`` with ``t`` fastest-varying in memory; lateral images are
indexed ``[ix, iy]``. Lateral coordinates are centred: pixel ``ix`` sits
at ``x = (ix - (nx - 1) / 2) * dx``. Time sample ``it`` maps to depth with
the one-way photoacoustic convention ``z = c * (t0 + it * dt)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage


class ValidationError(ValueError):
    """Raised when a domain object is constructed with invalid values."""


def _require(cond, msg):
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Scan geometry of a focused-transducer AR-PAM acquisition.

    Defaults correspond to a 50 MHz, NA 0.44 transducer focused at
    6.7 mm, sampled at 250 MS/s on a 15 um lateral raster.
    """

    focal_length: float = 6.7e-3
    numerical_aperture: float = 0.44
    sound_speed: float = 1500.0
    dx: float = 15e-6
    dy: float = 15e-6
    dt: float = 4e-9
    t0: float = 0.0
    center_frequency: float = 50e6

    def __post_init__(self):
        _require(self.focal_length > 0, "focal_length must be positive")
        _require(0 < self.numerical_aperture < 1, "numerical_aperture must lie in (0, 1)")
        _require(self.sound_speed > 0, "sound_speed must be positive")
        _require(self.dx > 0 and self.dy > 0, "lateral pitch must be positive")
        _require(self.dt > 0, "dt must be positive")
        for name in ("focal_length", "sound_speed", "dx", "dy", "dt", "t0"):
            _require(math.isfinite(getattr(self, name)), f"{name} must be finite")

    @property
    def dz(self) -> float:
        """Axial pitch of one time sample."""
        return self.sound_speed * self.dt

    @property
    def cone_slope(self) -> float:
        """tan(asin(NA)), the half-angle slope of the acceptance cone."""
        return math.tan(math.asin(self.numerical_aperture))

    def depth_of(self, it):
        """Depth of (possibly fractional) time index ``it``."""
        return self.sound_speed * (self.t0 + np.asarray(it, dtype=float) * self.dt)

    def with_t0_for_depth(self, z: float, index: float) -> "AcquisitionGeometry":
        """Copy whose time window places depth ``z`` at sample ``index``."""
        return replace(self, t0=z / self.sound_speed - index * self.dt)


def axial_index_of(z, geometry: AcquisitionGeometry):
    """Fractional time index at which depth ``z`` is recorded.

    Out-of-range results are returned as-is; callers clamp or skip.
    """
    return (np.asarray(z, dtype=float) / geometry.sound_speed - geometry.t0) / geometry.dt


def lateral_coords(n: int, pitch: float) -> np.ndarray:
    """Centred coordinates of ``n`` samples at ``pitch``."""
    return (np.arange(n) - (n - 1) / 2.0) * pitch


@dataclass(frozen=True, eq=False)
class RfVolume:
    """Real-valued pressure samples over ``(x, y, t)``."""

    geometry: AcquisitionGeometry
    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        _require(arr.ndim == 3, "RF volume must be 3D (nx, ny, nt)")
        _require(all(n > 0 for n in arr.shape), "RF volume dims must be positive")
        _require(bool(np.all(np.isfinite(arr))), "RF volume contains non-finite samples")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.samples.shape

    @property
    def x(self) -> np.ndarray:
        return lateral_coords(self.dims[0], self.geometry.dx)

    @property
    def y(self) -> np.ndarray:
        return lateral_coords(self.dims[1], self.geometry.dy)

    @property
    def z(self) -> np.ndarray:
        """Depth of every time sample."""
        return self.geometry.depth_of(np.arange(self.dims[2]))

    def with_samples(self, samples) -> "RfVolume":
        return RfVolume(self.geometry, samples)


@dataclass(frozen=True, eq=False)
class LateralImage:
    """Nonnegative 2D amplitude image (MAP or deconvolution result)."""

    pixels: np.ndarray
    dx: float
    dy: float

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=float)
        _require(arr.ndim == 2, "lateral image must be 2D")
        _require(all(n > 0 for n in arr.shape), "lateral image dims must be positive")
        _require(bool(np.all(np.isfinite(arr))), "lateral image contains non-finite pixels")
        _require(bool(np.all(arr >= 0)), "lateral image pixels must be nonnegative")
        _require(self.dx > 0 and self.dy > 0, "lateral pitch must be positive")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.pixels.shape

    @property
    def x(self) -> np.ndarray:
        return lateral_coords(self.dims[0], self.dx)

    @property
    def y(self) -> np.ndarray:
        return lateral_coords(self.dims[1], self.dy)

    def with_pixels(self, pixels) -> "LateralImage":
        return LateralImage(pixels, self.dx, self.dy)


def spectrum_center(shape) -> Tuple[int, ...]:
    """Index of the DC bin in a centred spectrum: ceil((n - 1) / 2) per axis."""
    return tuple(int(math.ceil((n - 1) / 2)) for n in shape)


@dataclass(frozen=True, eq=False)
class LateralSpectrum:
    """Centred 2D (or per-frequency 3D) k-space of a lateral grid.

    The first two axes hold the lateral wavenumbers ``(u, v)`` with the
    DC bin at :func:`spectrum_center`; an optional third axis holds the
    temporal frequency and is left in FFT order.
    """

    bins: np.ndarray

    @classmethod
    def of(cls, data) -> "LateralSpectrum":
        data = np.asarray(data)
        axes = tuple(range(data.ndim))
        return cls(np.fft.fftshift(np.fft.fftn(data, axes=axes), axes=(0, 1)))

    @property
    def dc_index(self) -> Tuple[int, int]:
        return spectrum_center(self.bins.shape[:2])

    def inverse(self) -> np.ndarray:
        """Real part of the inverse transform."""
        axes = tuple(range(self.bins.ndim))
        return np.real(np.fft.ifftn(np.fft.ifftshift(self.bins, axes=(0, 1)), axes=axes))


@dataclass(frozen=True)
class PsfModel:
    """Gaussian lateral PSF with a cone-law defocus beam radius.

    ``beam_radius`` is the half width at half maximum of the lateral
    amplitude profile: ``w0 = fwhm_focus / 2`` in focus, growing as
    ``|z_off| * tan(asin(NA))`` away from it.
    """

    fwhm_focus: float = 65e-6
    numerical_aperture: float = 0.44

    def __post_init__(self):
        _require(self.fwhm_focus > 0, "fwhm_focus must be positive")
        _require(0 < self.numerical_aperture < 1, "numerical_aperture must lie in (0, 1)")

    @property
    def w0(self) -> float:
        return self.fwhm_focus / 2.0

    @property
    def cone_slope(self) -> float:
        return math.tan(math.asin(self.numerical_aperture))

    def beam_radius(self, z_off):
        """w(z_off) = max(w0, |z_off| tan(asin(NA)))."""
        return np.maximum(self.w0, np.abs(np.asarray(z_off, dtype=float)) * self.cone_slope)

    def aperture_halfwidth(self, z_off):
        """Lateral reach of the VPD acceptance cone at ``z_off``."""
        return np.abs(np.asarray(z_off, dtype=float)) * self.cone_slope + self.w0

    def fwhm_at(self, z_off):
        return 2.0 * self.beam_radius(z_off)

    @property
    def sigma_focus(self) -> float:
        return self.fwhm_focus / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class SaftVariant(str, enum.Enum):
    PURE = "pure"
    DSAFT = "dsaft"
    FA_DIR0 = "fa-dir0"
    FA_DIR1 = "fa-dir1"


class DeconvMethod(str, enum.Enum):
    RL = "rl"
    MB2D = "mb2d"
    DMB = "dmb"


@dataclass(frozen=True)
class SaftConfig:
    """Settings for the directional SAFT family.

    ``epsilon_d`` is relative: the guard added to the sharpening
    denominator is ``epsilon_d * max(sum_n |K_n| ** gamma)``.
    """

    variant: SaftVariant = SaftVariant.FA_DIR1
    n_directions: int = 16
    gamma: float = 0.2
    use_cf: bool = True
    use_sir: bool = True
    epsilon_d: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", SaftVariant(self.variant))
        _require(int(self.n_directions) == self.n_directions and self.n_directions >= 1,
                 "n_directions must be an integer >= 1")
        _require(self.gamma >= 0, "gamma must be >= 0")
        _require(self.epsilon_d >= 0, "epsilon_d must be >= 0")
        _require(self.threads >= 1, "threads must be >= 1")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_directions) * math.pi / self.n_directions


# default Gaussian smoothing after MB/D-MB: sigma = fwhm_focus / divisor
SMOOTHING_DIVISOR = 10.0


@dataclass(frozen=True)
class DeconvConfig:
    """Settings for R-L, 2D MB and D-MB deconvolution.

    ``lam`` is an absolute L1 weight; when None the solver uses
    ``lam_rel * max|H^T y|`` for each problem it is handed.
    ``smoothing_sigma`` None means ``fwhm_focus / 10``.
    """

    method: DeconvMethod = DeconvMethod.DMB
    iterations: int = 15
    fista_iterations: int = 300
    lam: Optional[float] = None
    lam_rel: float = 0.1
    n_phases: int = 4
    smoothing_sigma: Optional[float] = None
    prescale: float = 1.0
    tol: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", DeconvMethod(self.method))
        _require(self.iterations >= 1, "iterations must be >= 1")
        _require(self.fista_iterations >= 1, "fista_iterations must be >= 1")
        _require(self.lam is None or self.lam >= 0, "lambda must be >= 0")
        _require(self.lam_rel >= 0, "lam_rel must be >= 0")
        _require(self.n_phases >= 1, "n_phases must be >= 1")
        _require(0 < self.prescale <= 1, "prescale must lie in (0, 1]")
        _require(self.smoothing_sigma is None or self.smoothing_sigma >= 0,
                 "smoothing_sigma must be >= 0")

    def sigma_for(self, psf: PsfModel) -> float:
        if self.smoothing_sigma is None:
            return psf.fwhm_focus / SMOOTHING_DIVISOR
        return self.smoothing_sigma


def map_projection(vol: RfVolume, t_range: Optional[Tuple[int, int]] = None) -> LateralImage:
    """Maximum amplitude projection of ``|samples|`` along t.

    ``t_range`` is a half-open ``(start, stop)`` index window.
    """
    nt = vol.dims[2]
    start, stop = (0, nt) if t_range is None else t_range
    start, stop = max(int(start), 0), min(int(stop), nt)
    if stop <= start:
        raise ValueError("empty projection window")
    img = np.max(np.abs(vol.samples[:, :, start:stop]), axis=2)
    return LateralImage(img, vol.geometry.dx, vol.geometry.dy)


# --- lateral rotation ----------------------------------------------------------

def canvas_size(shape) -> int:
    """Odd square side that holds ``shape`` under any rotation."""
    n = int(math.ceil(math.hypot(shape[0], shape[1]))) + 2
    return n + 1 - n % 2


def _rotation_affine(angle, in_shape, out_shape):
    # out[p'] = in[R(angle) (p' - c_out) + c_in]; R maps axis-0 to (cos, sin)
    c, s = math.cos(angle), math.sin(angle)
    mat = np.array([[c, -s], [s, c]])
    c_in = (np.asarray(in_shape[:2], dtype=float) - 1) / 2.0
    c_out = (np.asarray(out_shape[:2], dtype=float) - 1) / 2.0
    return mat, c_in - mat @ c_out


def _affine_lateral(data, mat, offset, out_shape):
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        return ndimage.affine_transform(data, mat, offset=offset, output_shape=tuple(out_shape),
                                        order=1, mode="constant", cval=0.0)
    full = np.eye(3)
    full[:2, :2] = mat
    off = np.zeros(3)
    off[:2] = offset
    return ndimage.affine_transform(data, full, offset=off,
                                    output_shape=tuple(out_shape[:2]) + data.shape[2:],
                                    order=1, mode="constant", cval=0.0)


def rotate_into_canvas(data, angle: float, size: Optional[int] = None) -> np.ndarray:
    """Resample ``data`` so lateral direction ``angle`` lies along axis 0.

    ``angle`` is measured from axis 0 toward axis 1. The output is a
    zero-padded square canvas (bilinear interpolation). Extra trailing
    axes (e.g. t) are carried along untouched.
    """
    data = np.asarray(data, dtype=float)
    n = canvas_size(data.shape) if size is None else size
    out_shape = (n, n) + data.shape[2:]
    mat, off = _rotation_affine(angle, data.shape, out_shape)
    return _affine_lateral(data, mat, off, out_shape)


def rotate_from_canvas(canvas, angle: float, shape) -> np.ndarray:
    """Inverse of :func:`rotate_into_canvas`, cropped back to ``shape``."""
    canvas = np.asarray(canvas, dtype=float)
    out_shape = tuple(shape[:2]) + canvas.shape[2:]
    mat, off = _rotation_affine(-angle, canvas.shape, out_shape)
    return _affine_lateral(canvas, mat, off, out_shape)


def rotate_image(data, angle: float) -> np.ndarray:
    """Rotate a lateral grid about its centre, keeping its shape."""
    data = np.asarray(data, dtype=float)
    mat, off = _rotation_affine(angle, data.shape, data.shape)
    return _affine_lateral(data, mat, off, data.shape)
