"""Deconvolution: Richardson-Lucy, L1 model-based (FISTA) in 2D, and the
directional model-based (D-MB) scheme that deconvolves angular k-space
components one direction at a time.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from arpam.core import (
    DeconvConfig,
    LateralImage,
    PsfModel,
    RfVolume,
    rotate_from_canvas,
    rotate_into_canvas,
)
from arpam.saft import build_windows

log = logging.getLogger(__name__)

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
AXIAL_FWHM_DEFAULT = 35e-6
_PATIENCE = 5


def gaussian_kernel(fwhm_samples: float) -> np.ndarray:
    """Unit-sum, odd-length sampled Gaussian; a delta for tiny widths."""
    sigma = fwhm_samples * FWHM_TO_SIGMA
    half = max(1, int(math.ceil(4.0 * sigma)))
    i = np.arange(-half, half + 1, dtype=float)
    if sigma <= 0:
        k = (i == 0).astype(float)
    else:
        k = np.exp(-0.5 * (i / sigma) ** 2)
    return k / k.sum()


class ConvolutionDictionary:
    """Separable zero-padded convolution ``H`` along one or more axes.

    Each kernel must be odd-length; ``H^T`` is the matching correlation.
    """

    def __init__(self, kernels: Sequence[np.ndarray], axes: Sequence[int]):
        if len(kernels) != len(axes):
            raise ValueError("one kernel per axis")
        self.kernels = [np.asarray(k, dtype=float) for k in kernels]
        for k in self.kernels:
            if k.ndim != 1 or len(k) % 2 == 0:
                raise ValueError("kernels must be odd-length 1D arrays")
        self.axes = tuple(axes)
        self._lipschitz = {}

    @classmethod
    def gaussian(cls, fwhm: float, pitch, axes=(0,)) -> "ConvolutionDictionary":
        """Gaussian of physical ``fwhm`` sampled at ``pitch`` along each axis."""
        pitches = pitch if isinstance(pitch, (tuple, list)) else [pitch] * len(axes)
        return cls([gaussian_kernel(fwhm / p) for p in pitches], axes)

    @classmethod
    def identity(cls, axis=0) -> "ConvolutionDictionary":
        return cls([np.array([1.0])], (axis,))

    def apply(self, x):
        out = np.asarray(x, dtype=float)
        for k, ax in zip(self.kernels, self.axes):
            out = ndimage.convolve1d(out, k, axis=ax, mode="constant")
        return out

    def adjoint(self, r):
        out = np.asarray(r, dtype=float)
        for k, ax in zip(self.kernels, self.axes):
            out = ndimage.correlate1d(out, k, axis=ax, mode="constant")
        return out

    def gradient(self, x, y):
        """Gradient of ``0.5 * ||y - H x||^2``."""
        return self.adjoint(self.apply(x) - y)

    def lipschitz(self, shape, steps: int = 50, safety: float = 1.01, seed: int = 0) -> float:
        """Upper estimate of ``||H||^2`` by power iteration on ``H^T H``."""
        key = tuple(shape)
        if key not in self._lipschitz:
            v = np.random.default_rng(seed).standard_normal(shape)
            v /= np.linalg.norm(v)
            lam = 0.0
            for _ in range(steps):
                w = self.adjoint(self.apply(v))
                lam = float(np.linalg.norm(w))
                if lam == 0.0:
                    break
                v = w / lam
            self._lipschitz[key] = max(lam, 1e-12) * safety
        return self._lipschitz[key]


@dataclass
class FistaState:
    x: np.ndarray
    momentum: np.ndarray
    step: float
    t: float = 1.0
    history: List[float] = field(default_factory=list)


def l1_objective(x, y, H: ConvolutionDictionary, lam: float) -> float:
    r = y - H.apply(x)
    return 0.5 * float(np.sum(r * r)) + lam * float(np.sum(np.abs(x)))


def default_lambda(y, H: ConvolutionDictionary, lam_rel: float = 0.1) -> float:
    return lam_rel * float(np.max(np.abs(H.adjoint(y)))) if np.size(y) else 0.0


def fista_l1(y, H: ConvolutionDictionary, lam: Optional[float] = None, iterations: int = 300,
             nonneg: bool = True, lam_rel: float = 0.1, tol: float = 1e-8,
             return_state: bool = False):
    """Minimise ``0.5 ||y - H x||^2 + lam ||x||_1`` by monotone FISTA.

    ``y`` may carry extra axes; the problem is then solved jointly (the
    objective is the sum over all samples). With ``nonneg`` the proximal
    step also projects onto ``x >= 0``.
    """
    y = np.asarray(y, dtype=float)
    if lam is None:
        lam = default_lambda(y, H, lam_rel)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    L = H.lipschitz(y.shape)
    thr = lam / L

    def prox(v):
        if nonneg:
            return np.maximum(v - thr, 0.0)
        return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)

    x = np.zeros_like(y)
    state = FistaState(x=x, momentum=x.copy(), step=1.0 / L)
    f_x = l1_objective(x, y, H, lam)
    state.history.append(f_x)
    quiet = 0
    for _ in range(iterations):
        z = prox(state.momentum - state.step * H.gradient(state.momentum, y))
        f_z = l1_objective(z, y, H, lam)
        x_prev = state.x
        if f_z <= f_x:
            x_new, f_new = z, f_z
        else:
            x_new, f_new = x_prev, f_x
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * state.t * state.t))
        state.momentum = (x_new + (state.t / t_next) * (z - x_new)
                          + ((state.t - 1.0) / t_next) * (x_new - x_prev))
        state.t = t_next
        state.x = x_new
        state.history.append(f_new)
        # require a few consecutive flat steps: near the minimum the
        # objective change is second order in the iterate error
        quiet = quiet + 1 if abs(f_z - f_x) <= tol * max(f_x, 1e-300) else 0
        f_x = f_new
        if quiet >= _PATIENCE:
            break
    return state if return_state else state.x


# --- Richardson-Lucy ---------------------------------------------------------

def _as_pixels(img):
    if isinstance(img, LateralImage):
        return img.pixels, img.dx, img.dy
    return np.asarray(img, dtype=float), None, None


def _rl_iterate(data, kernels, axes, iterations, mode="reflect"):
    data = np.asarray(data, dtype=float)
    if np.any(data < 0):
        raise ValueError("R-L requires nonnegative input")
    peak = float(np.max(data)) if data.size else 0.0
    eps = 1e-12 * peak
    est = data.copy()

    def blur(a, fn):
        for k, ax in zip(kernels, axes):
            a = fn(a, k, axis=ax, mode=mode)
        return a

    for _ in range(iterations):
        conv = blur(est, ndimage.convolve1d)
        ratio = np.ones_like(data)
        np.divide(data, conv, out=ratio, where=conv > eps)
        est = est * blur(ratio, ndimage.correlate1d)
        np.maximum(est, 0.0, out=est)
    return est


def richardson_lucy(img, psf, iterations: int = 15) -> LateralImage:
    """Richardson-Lucy deconvolution with a separable Gaussian PSF.

    ``psf`` is a :class:`PsfModel` (Gaussian of FWHM ``fwhm_focus`` at the
    image pitch) or a pair of odd-length 1D kernels for the two axes.
    Boundaries are reflected so that flat fields are fixed points.
    """
    pixels, dx, dy = _as_pixels(img)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if isinstance(psf, PsfModel):
        if dx is None:
            raise ValueError("a PsfModel needs a LateralImage with a pitch")
        kernels = [gaussian_kernel(psf.fwhm_focus / dx), gaussian_kernel(psf.fwhm_focus / dy)]
    else:
        kernels = [np.asarray(k, dtype=float) for k in psf]
    out = _rl_iterate(pixels, kernels, (0, 1), iterations)
    return LateralImage(out, dx or 1.0, dy or 1.0)


# --- 2D MB -----------------------------------------------------------------------

def _smooth(a, sigma_px):
    if np.isscalar(sigma_px):
        sigma_px = (sigma_px, sigma_px)
    if max(sigma_px) <= 0:
        return np.asarray(a, dtype=float)
    return ndimage.gaussian_filter(a, sigma_px, mode="constant", truncate=4.0)


def mb_2d(img: LateralImage, psf: PsfModel, cfg: DeconvConfig = DeconvConfig(),
          dictionary: Optional[ConvolutionDictionary] = None) -> LateralImage:
    """L1 model-based deconvolution with a separable 2D Gaussian dictionary,
    followed by Gaussian smoothing."""
    H = dictionary or ConvolutionDictionary.gaussian(psf.fwhm_focus, (img.dx, img.dy), axes=(0, 1))
    x = fista_l1(img.pixels, H, lam=cfg.lam, iterations=cfg.fista_iterations,
                 lam_rel=cfg.lam_rel, tol=cfg.tol)
    sigma = cfg.sigma_for(psf)
    return img.with_pixels(np.maximum(_smooth(x, (sigma / img.dx, sigma / img.dy)), 0.0))


# --- D-MB ------------------------------------------------------------------------

def directional_decompose(img, phase: float, n_components: int = 2) -> Tuple[np.ndarray, ...]:
    """Split an image into angular k-space components at ``phase``.

    Component ``n`` holds wavevectors near angle ``n * pi / 2 + phase``
    from the x axis. The components sum back to the input.
    """
    pixels = img.pixels if isinstance(img, LateralImage) else np.asarray(img, dtype=float)
    spec = np.fft.fft2(pixels)
    windows = np.fft.ifftshift(build_windows(pixels.shape, n_components, phase), axes=(-2, -1))
    return tuple(np.real(np.fft.ifft2(spec * w)) for w in windows)


def _resize(a, shape):
    # bilinear, corners aligned
    rows = np.linspace(0, a.shape[0] - 1, shape[0])
    cols = np.linspace(0, a.shape[1] - 1, shape[1])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(a, [rr, cc], order=1, mode="nearest")


def phase_shifts(n_phases: int) -> np.ndarray:
    return np.arange(n_phases) * math.pi / (2 * n_phases)


def _dmb_core(pixels, psf: PsfModel, cfg: DeconvConfig, pitch: float):
    H = ConvolutionDictionary.gaussian(psf.fwhm_focus, pitch, axes=(0,))
    lam = cfg.lam if cfg.lam is not None else default_lambda(pixels, H, cfg.lam_rel)
    sigma_px = cfg.sigma_for(psf) / pitch

    def branch(job):
        comp, angle = job
        canvas = rotate_into_canvas(comp, angle)
        x = fista_l1(canvas, H, lam=lam, iterations=cfg.fista_iterations, tol=cfg.tol)
        back = rotate_from_canvas(x, angle, pixels.shape)
        return np.maximum(_smooth(back, sigma_px), 0.0)

    jobs = []
    for phi in phase_shifts(cfg.n_phases):
        comps = directional_decompose(pixels, phi)
        for n, comp in enumerate(comps):
            jobs.append((comp, n * math.pi / 2 + phi))
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(branch, jobs))
    else:
        results = [branch(j) for j in jobs]
    total = np.zeros_like(pixels)
    for r in results:
        total += r
    return total / cfg.n_phases


def dmb_deconvolve(img: LateralImage, psf: PsfModel, cfg: DeconvConfig = DeconvConfig(),
                   return_scaled: bool = False):
    """Directional model-based deconvolution of a lateral image.

    For each phase ``phi_m = m pi / (2M)`` the image is split into two
    perpendicular angular components; each is rotated so its direction
    lies along x, deconvolved row-wise by 1D L1 FISTA, rotated back and
    Gaussian-smoothed. The ``2M`` results are summed over the two
    components and averaged over the phases.

    With ``cfg.prescale < 1`` the image is shrunk before processing (the
    PSF keeps its pixel width, so features become small relative to it)
    and enlarged afterwards. ``return_scaled`` additionally returns the
    result at the reduced scale.
    """
    if not math.isclose(img.dx, img.dy, rel_tol=1e-9):
        raise ValueError("D-MB needs an isotropic lateral pitch")
    pixels = img.pixels
    if cfg.prescale < 1.0:
        small_shape = tuple(max(2, int(round(n * cfg.prescale))) for n in pixels.shape)
        small = np.maximum(_resize(pixels, small_shape), 0.0)
        small_out = _dmb_core(small, psf, cfg, img.dx)
        out = np.maximum(_resize(small_out, pixels.shape), 0.0)
        result = img.with_pixels(out)
        if return_scaled:
            return result, LateralImage(small_out, img.dx / cfg.prescale, img.dy / cfg.prescale)
        return result
    result = img.with_pixels(_dmb_core(pixels, psf, cfg, img.dx))
    return (result, result) if return_scaled else result


def dmb_slicewise_3d(vol: RfVolume, psf: PsfModel, cfg: DeconvConfig = DeconvConfig(),
                     axial: Optional[dict] = None) -> RfVolume:
    """D-MB applied independently to the rectified lateral slice at every t.

    ``axial``, if given, holds keyword arguments for
    :func:`apply_axial_deconvolution`, run afterwards.
    """
    geo = vol.geometry
    out = np.empty(vol.dims)
    for it in range(vol.dims[2]):
        sl = LateralImage(np.abs(vol.samples[:, :, it]), geo.dx, geo.dy)
        if np.max(sl.pixels) == 0:
            out[:, :, it] = 0.0
            continue
        out[:, :, it] = dmb_deconvolve(sl, psf, cfg).pixels
    res = vol.with_samples(out)
    if axial is not None:
        res = apply_axial_deconvolution(res, **axial)
    return res


def apply_axial_deconvolution(vol: RfVolume, method: str = "rl",
                              axial_fwhm: float = AXIAL_FWHM_DEFAULT,
                              iterations: int = 10, lam: Optional[float] = None,
                              lam_rel: float = 0.1, fista_iterations: int = 300,
                              smoothing_sigma: Optional[float] = None,
                              kernel: Optional[np.ndarray] = None) -> RfVolume:
    """1D R-L or 1D MB deconvolution along t for every A-line.

    Works on the rectified amplitude. The axial PSF is a Gaussian of
    ``axial_fwhm`` (metres, converted with ``dz = c dt``) unless an
    explicit odd-length ``kernel`` is supplied. For MB the smoothing
    sigma defaults to a quarter of the axial FWHM.
    """
    data = np.abs(vol.samples)
    dz = vol.geometry.dz
    k = gaussian_kernel(axial_fwhm / dz) if kernel is None else np.asarray(kernel, dtype=float)
    method = method.lower()
    if method == "rl":
        out = _rl_iterate(data, [k], (2,), iterations)
    elif method == "mb":
        H = ConvolutionDictionary([k], (2,))
        x = fista_l1(data, H, lam=lam, iterations=fista_iterations, lam_rel=lam_rel)
        sigma = axial_fwhm / 4.0 if smoothing_sigma is None else smoothing_sigma
        out = np.maximum(ndimage.gaussian_filter1d(x, sigma / dz, axis=2, mode="constant"), 0.0) \
            if sigma > 0 else x
    else:
        raise ValueError(f"invalid axial method {method!r}")
    return vol.with_samples(out)


def deconvolve(img: LateralImage, psf: PsfModel, cfg: DeconvConfig = DeconvConfig()) -> LateralImage:
    """Dispatch on ``cfg.method``."""
    from arpam.core import DeconvMethod

    if cfg.method is DeconvMethod.RL:
        return richardson_lucy(img, psf, cfg.iterations)
    if cfg.method is DeconvMethod.MB2D:
        return mb_2d(img, psf, cfg)
    return dmb_deconvolve(img, psf, cfg)
