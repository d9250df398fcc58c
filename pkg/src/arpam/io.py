"""File formats: PAV1 volumes, 16-bit PGM images, CSV matrices and
reports, and the key=value run configuration."""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np

from arpam.core import (
    AcquisitionGeometry,
    DeconvConfig,
    LateralImage,
    PsfModel,
    RfVolume,
    SaftConfig,
)

MAGIC = b"PAV1"
_HEADER = struct.Struct("<3I7d")


class FormatError(ValueError):
    pass


# --- PAV1 --------------------------------------------------------------------------

def encode_pav1(vol: RfVolume) -> bytes:
    g = vol.geometry
    nx, ny, nt = vol.dims
    head = _HEADER.pack(nx, ny, nt, g.dx, g.dy, g.dt, g.t0, g.sound_speed,
                        g.focal_length, g.numerical_aperture)
    payload = np.ascontiguousarray(vol.samples, dtype="<f4").tobytes()
    return MAGIC + head + payload


def decode_pav1(data: bytes) -> RfVolume:
    if data[:4] != MAGIC:
        raise FormatError("not a PAV1 file")
    if len(data) < 4 + _HEADER.size:
        raise FormatError("truncated PAV1 header")
    nx, ny, nt, dx, dy, dt, t0, c, zf, na = _HEADER.unpack_from(data, 4)
    start = 4 + _HEADER.size
    expected = 4 * nx * ny * nt
    if len(data) - start != expected:
        raise FormatError(f"PAV1 payload is {len(data) - start} bytes, expected {expected}")
    samples = np.frombuffer(data, dtype="<f4", offset=start).reshape(nx, ny, nt)
    geo = AcquisitionGeometry(focal_length=zf, numerical_aperture=na, sound_speed=c,
                              dx=dx, dy=dy, dt=dt, t0=t0)
    return RfVolume(geo, samples.astype(float))


def write_pav1(path, vol: RfVolume) -> None:
    Path(path).write_bytes(encode_pav1(vol))


def read_pav1(path) -> RfVolume:
    return decode_pav1(Path(path).read_bytes())


def is_pav1(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC


# --- images ----------------------------------------------------------------------

def write_pgm16(path, pixels) -> float:
    """Binary 16-bit PGM, x along the width. Returns the amplitude per count.

    The amplitude scale is also written to ``<path>.scale``.
    """
    a = np.asarray(pixels, dtype=float)
    top = float(np.max(a)) if a.size else 0.0
    scale = top / 65535.0 if top > 0 else 1.0
    counts = np.clip(np.rint(a / scale), 0, 65535).astype(">u2")
    nx, ny = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(counts.T).tobytes())
    Path(str(path) + ".scale").write_text(f"scale {scale!r}\nmax {top!r}\n")
    return scale


def read_pgm16(path) -> np.ndarray:
    """Inverse of :func:`write_pgm16` (uses the sidecar scale if present)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise FormatError("not a binary PGM file")
    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    counts = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    img = counts.reshape(height, width).T.astype(float)
    side = Path(str(path) + ".scale")
    if side.exists():
        fields = dict(line.split(None, 1) for line in side.read_text().splitlines() if line.strip())
        img *= float(fields["scale"])
    return img


def write_matrix_csv(path, pixels) -> None:
    np.savetxt(path, np.asarray(pixels, dtype=float), delimiter=",", fmt="%.9g")


def read_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def read_lateral(path, dx: float, dy: float) -> LateralImage:
    """2D image from a PGM or a CSV matrix."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(2)
    pixels = read_pgm16(p) if head == b"P5" else read_matrix_csv(p)
    return LateralImage(pixels, dx, dy)


# --- reports -----------------------------------------------------------------------

REPORT_HEADER = ("metric", "value", "unit", "region")


def write_report(stream, rows: Iterable[Sequence[Any]]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for metric, value, unit, region in rows:
        w.writerow([metric, repr(float(value)), unit, region])


def write_timing(path, timings: Dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage", "seconds"))
        for k, v in timings.items():
            w.writerow((k, f"{v:.6f}"))


# --- run configuration -----------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs; serialised as ``key = value`` lines.

    Geometry and PSF keys use SI units. ``focus_index`` places the focal
    plane in the time window when ``t0`` is not given.
    """

    # acquisition / simulation
    nx: int = 121
    ny: int = 121
    nt: int = 64
    dx: float = 15e-6
    dy: float = 15e-6
    dt: float = 4e-9
    t0: Optional[float] = None
    focus_index: Optional[float] = None
    c: float = 1500.0
    z_f: float = 6.7e-3
    na: float = 0.44
    fwhm_focus: float = 65e-6
    scene: Optional[str] = None
    noise_psnr: Optional[float] = None
    noise_seed: int = 0
    noise_map: bool = False  # noise on the MAP entering deconvolution, not on A-lines
    # SAFT
    variant: str = "fa-dir1"
    n_dirs: int = 16
    gamma: float = 0.2
    epsilon_d: float = 1e-6
    cf: bool = True
    sir: bool = True
    # deconvolution
    method: str = "dmb"
    iterations: int = 15
    fista_iterations: int = 300
    lam: Optional[float] = None
    lam_rel: float = 0.1
    m: int = 4
    smoothing_sigma: Optional[float] = None
    prescale: float = 1.0
    tol: float = 1e-8
    slicewise: bool = False
    axial: Optional[str] = None
    # run
    out_dir: str = "."
    threads: int = 1

    def geometry(self) -> AcquisitionGeometry:
        geo = AcquisitionGeometry(focal_length=self.z_f, numerical_aperture=self.na,
                                  sound_speed=self.c, dx=self.dx, dy=self.dy, dt=self.dt)
        if self.t0 is not None:
            return dataclasses.replace(geo, t0=self.t0)
        idx = self.nt // 2 if self.focus_index is None else self.focus_index
        return geo.with_t0_for_depth(self.z_f, idx)

    def psf(self) -> PsfModel:
        return PsfModel(fwhm_focus=self.fwhm_focus, numerical_aperture=self.na)

    def saft_config(self) -> SaftConfig:
        return SaftConfig(variant=self.variant, n_directions=self.n_dirs, gamma=self.gamma,
                          use_cf=self.cf, use_sir=self.sir, epsilon_d=self.epsilon_d,
                          threads=self.threads)

    def deconv_config(self) -> DeconvConfig:
        return DeconvConfig(method=self.method, iterations=self.iterations,
                            fista_iterations=self.fista_iterations, lam=self.lam,
                            lam_rel=self.lam_rel, n_phases=self.m,
                            smoothing_sigma=self.smoothing_sigma, prescale=self.prescale,
                            tol=self.tol, threads=self.threads)

    @property
    def dims(self):
        return (self.nx, self.ny, self.nt)


_ALIASES = {"lambda": "lam"}


def _converter(f: dataclasses.Field):
    name = f.name
    default = f.default
    if name in ("scene", "axial"):
        return lambda s: None if s.strip().lower() in ("", "none") else s.strip()
    if isinstance(default, bool):
        return _bool
    if name in ("t0", "focus_index", "noise_psnr", "lam", "smoothing_sigma"):
        return _opt_float
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str.strip


CONFIG_KEYS = {f.name: _converter(f) for f in dataclasses.fields(RunConfig)}


def canonical_key(key: str) -> str:
    k = key.strip().lower().replace("-", "_")
    return _ALIASES.get(k, k)


def parse_config_text(text: str) -> Dict[str, Any]:
    """``key = value`` lines with ``#`` comments -> typed overrides."""
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = canonical_key(key)
        if key not in CONFIG_KEYS:
            raise FormatError(f"config line {lineno}: unknown key {key.strip()!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise FormatError(f"config line {lineno}: {exc}") from None
    return out


def build_run_config(*layers: Dict[str, Any]) -> RunConfig:
    """Merge override dicts left to right (later wins; None is skipped)."""
    merged: Dict[str, Any] = {}
    for layer in layers:
        for k, v in layer.items():
            k = canonical_key(k)
            if k not in CONFIG_KEYS:
                raise FormatError(f"unknown config key {k!r}")
            if v is not None:
                merged[k] = v
    return RunConfig(**merged)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float) and math.isfinite(v):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
