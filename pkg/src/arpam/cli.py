"""``arpam`` command line: simulate, saft, deconv, measure, pipeline.

Every option that mirrors a run-config key may also come from
``--config FILE``; explicit flags win. ``ARPAM_THREADS`` supplies the
default for ``--threads``. Errors go to stderr as a single ``ERROR:``
line and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from arpam import deconv, io, metrics, phantom, saft
from arpam.core import LateralImage, PsfModel, RfVolume, map_projection

log = logging.getLogger("arpam")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# --- option groups -----------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--threads", type=int, help="worker cap (default $ARPAM_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_geometry(p):
    g = p.add_argument_group("geometry")
    for flag, typ, hlp in [
        ("--nx", int, "lateral samples along x"), ("--ny", int, "lateral samples along y"),
        ("--nt", int, "time samples"), ("--dx", float, "x pitch (m)"), ("--dy", float, "y pitch (m)"),
        ("--dt", float, "time pitch (s)"), ("--t0", float, "time of first sample (s)"),
        ("--focus-index", float, "time index of the focal plane when --t0 is not given"),
        ("--c", float, "speed of sound (m/s)"), ("--z-f", float, "focal length (m)"),
        ("--na", float, "numerical aperture"),
    ]:
        g.add_argument(flag, type=typ, help=hlp)


def _add_psf(p):
    p.add_argument("--fwhm-focus", type=float, help="in-focus lateral PSF FWHM (m)")


def _add_saft(p):
    g = p.add_argument_group("SAFT")
    g.add_argument("--variant", choices=[v.value for v in saft.SaftVariant])
    g.add_argument("--n-dirs", type=int, help="number of 1D-SAFT directions N'")
    g.add_argument("--gamma", type=float)
    g.add_argument("--epsilon-d", type=float, help="relative guard of the sharpening factor")
    g.add_argument("--cf", dest="cf", action="store_const", const=True)
    g.add_argument("--no-cf", dest="cf", action="store_const", const=False)
    g.add_argument("--sir", dest="sir", action="store_const", const=True)
    g.add_argument("--no-sir", dest="sir", action="store_const", const=False)


def _add_map_noise(p):
    p.add_argument("--noise-map", dest="noise_map", action="store_const", const=True,
                   help="add the noise to the 2D MAP before deconvolution instead of the A-lines")


def _add_deconv(p):
    g = p.add_argument_group("deconvolution")
    g.add_argument("--method", help="rl, mb2d or dmb")
    g.add_argument("--iterations", type=int, help="R-L iterations")
    g.add_argument("--fista-iterations", type=int)
    g.add_argument("--lambda", dest="lam", type=float, help="absolute L1 weight")
    g.add_argument("--lam-rel", type=float, help="L1 weight relative to max|H^T y|")
    g.add_argument("--m", type=int, help="number of D-MB phases M")
    g.add_argument("--smoothing-sigma", type=float, help="Gaussian smoothing sigma (m)")
    g.add_argument("--prescale", type=float, help="D-MB pre-scaling factor in (0, 1]")
    g.add_argument("--tol", type=float)
    g.add_argument("--slicewise", dest="slicewise", action="store_const", const=True,
                   help="deconvolve every t-slice instead of the MAP")
    g.add_argument("--axial", choices=["rl", "mb"], help="axial 1D pass after --slicewise")


_NON_CONFIG = {"config", "verbose", "command", "func", "input", "output", "out",
               "profile", "snr", "signal", "background", "resolvability",
               "criterion_db"}


def _resolve(args) -> io.RunConfig:
    layers: List[Dict] = []
    env = os.environ.get("ARPAM_THREADS")
    if env:
        try:
            layers.append({"threads": int(env)})
        except ValueError:
            raise CliError(f"ARPAM_THREADS must be an integer, got {env!r}") from None
    if getattr(args, "config", None):
        layers.append(io.parse_config_text(Path(args.config).read_text()))
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and v is not None}
    layers.append(flags)
    return io.build_run_config(*layers)


def _out_path(cfg: io.RunConfig, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() or p.parent != Path(".") else Path(cfg.out_dir) / p


# --- helpers ---------------------------------------------------------------------

def _load_volume_or_image(path, cfg: io.RunConfig):
    if io.is_pav1(path):
        return io.read_pav1(path)
    return io.read_lateral(path, cfg.dx, cfg.dy)


def _as_map(obj) -> LateralImage:
    return map_projection(obj) if isinstance(obj, RfVolume) else obj


def _write_image(prefix: Path, pixels) -> List[Path]:
    pgm, csvp = prefix.with_suffix(".pgm"), prefix.with_suffix(".csv")
    io.write_pgm16(pgm, pixels)
    io.write_matrix_csv(csvp, pixels)
    return [pgm, csvp]


def _psf_for(cfg: io.RunConfig, vol: RfVolume) -> PsfModel:
    # the aperture follows the NA stored with the volume
    return PsfModel(fwhm_focus=cfg.fwhm_focus,
                    numerical_aperture=vol.geometry.numerical_aperture)


def _simulate(cfg: io.RunConfig) -> RfVolume:
    scene = phantom.load_scene(cfg.scene) if cfg.scene else phantom.SceneSpec()
    vol = phantom.simulate(scene, cfg.geometry(), cfg.psf(), cfg.dims)
    if cfg.noise_psnr is not None and not cfg.noise_map:
        vol = phantom.add_noise(vol, phantom.NoiseSpec(cfg.noise_psnr, cfg.noise_seed))
    return vol


def _deconvolve(src, cfg: io.RunConfig, prefix: Path, timings: Dict[str, float]) -> LateralImage:
    dcfg = cfg.deconv_config()
    psf = cfg.psf()
    if prefix.suffix in (".pgm", ".csv", ".pav1"):
        prefix = prefix.with_suffix("")
    t = time.perf_counter()
    if cfg.slicewise:
        if not isinstance(src, RfVolume):
            raise CliError("--slicewise needs a PAV1 volume")
        axial = {"method": cfg.axial} if cfg.axial else None
        vol = deconv.dmb_slicewise_3d(src, psf, dcfg, axial=axial)
        io.write_pav1(prefix.with_suffix(".pav1"), vol)
        out = map_projection(vol)
    else:
        img = _as_map(src)
        if cfg.noise_map and cfg.noise_psnr is not None:
            img = phantom.add_noise_map(img, phantom.NoiseSpec(cfg.noise_psnr, cfg.noise_seed))
        if dcfg.method.value == "dmb" and dcfg.prescale < 1.0:
            out, small = deconv.dmb_deconvolve(img, psf, dcfg, return_scaled=True)
            _write_image(prefix.with_name(prefix.name + "_scaled"), small.pixels)
        else:
            out = deconv.deconvolve(img, psf, dcfg)
    timings["deconv"] = time.perf_counter() - t
    if not np.all(np.isfinite(out.pixels)):
        raise CliError("deconvolution produced non-finite values")
    _write_image(prefix, out.pixels)
    log.info("deconvolution (%s) %.2f s", dcfg.method.value, timings["deconv"])
    return out


def deconv_method(name):
    from arpam.core import DeconvMethod
    try:
        return DeconvMethod(name)
    except ValueError:
        raise CliError(f"invalid method {name!r} (expected rl, mb2d or dmb)") from None


def _parse_floats(text: str, n: int, what: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise CliError(f"malformed {what}: {text!r}") from None
    if len(vals) != n:
        raise CliError(f"malformed {what}: expected {n} comma-separated numbers")
    return vals


def _parse_region(text: Optional[str], shape):
    """``i0:i1,j0:j1`` index ranges, or ``border`` / None for defaults."""
    if text is None:
        return None
    if text.strip().lower() == "border":
        return metrics.border_mask(shape)
    parts = text.split(",")
    if len(parts) != 2:
        raise CliError(f"malformed region {text!r}: expected i0:i1,j0:j1")
    sl = []
    for part, n in zip(parts, shape):
        bounds = part.split(":")
        if len(bounds) != 2:
            raise CliError(f"malformed region {text!r}: expected i0:i1,j0:j1")
        try:
            a, b = (int(v) if v.strip() else None for v in bounds)
        except ValueError:
            raise CliError(f"malformed region {text!r}") from None
        s = slice(a, b)
        if len(range(*s.indices(n))) == 0:
            raise CliError(f"region {text!r} is empty")
        sl.append(s)
    return tuple(sl)


def _measure(img: LateralImage, args) -> List[tuple]:
    rows = []
    for spec in args.profile or []:
        x0, y0, x1, y1 = _parse_floats(spec, 4, "profile")
        w = metrics.fwhm(metrics.extract_profile(img, (x0, y0), (x1, y1)))
        rows.append(("fwhm", w, "m", f"profile {x0} {y0} {x1} {y1}"))
    if args.resolvability:
        scene = phantom.load_scene(args.resolvability)
        d = metrics.min_resolvable_distance(img, scene, criterion_db=args.criterion_db)
        rows.append(("min_resolvable_distance", d, "m", f"scene {args.resolvability}"))
    if args.snr or args.signal or args.background or not rows:
        sig = _parse_region(args.signal, img.dims)
        bg = _parse_region(args.background, img.dims)
        value = metrics.snr_db(img, sig, bg)
        rows.append(("snr", value, "dB",
                     f"signal {args.signal or 'rest'}; background {args.background or 'border'}"))
    return rows


def _add_measure_flags(p):
    g = p.add_argument_group("measurements")
    g.add_argument("--profile", action="append",
                   help="x0,y0,x1,y1 (m, centred); report the FWHM along it (repeatable)")
    g.add_argument("--snr", action="store_true", help="report SNR (default if nothing else)")
    g.add_argument("--signal", help="signal region i0:i1,j0:j1 (default: non-border)")
    g.add_argument("--background", help="background region i0:i1,j0:j1 or 'border'")
    g.add_argument("--resolvability", help="two-line scene file for the resolvable distance")
    g.add_argument("--criterion-db", type=float, default=6.0)


# --- commands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    vol = _simulate(cfg)
    out = _out_path(cfg, args.output)
    io.write_pav1(out, vol)
    log.info("wrote %s %s", out, vol.dims)
    return 0


def cmd_saft(args) -> int:
    cfg = _resolve(args)
    vol = io.read_pav1(args.input)
    timings: Dict[str, float] = {}
    t = time.perf_counter()
    res = saft.run_saft(vol, cfg.saft_config(), _psf_for(cfg, vol), timings=timings)
    timings["total"] = time.perf_counter() - t
    out = _out_path(cfg, args.output)
    io.write_pav1(out, res)
    io.write_timing(Path(str(out) + ".timing.csv"), timings)
    log.info("SAFT wall time %.2f s", timings["total"])
    return 0


def cmd_deconv(args) -> int:
    cfg = _resolve(args)
    deconv_method(cfg.method)
    src = _load_volume_or_image(args.input, cfg)
    prefix = _out_path(cfg, args.output)
    timings: Dict[str, float] = {}
    _deconvolve(src, cfg, prefix, timings)
    io.write_timing(Path(str(prefix) + ".timing.csv"), timings)
    return 0


def cmd_measure(args) -> int:
    cfg = _resolve(args)
    img = _as_map(_load_volume_or_image(args.input, cfg))
    rows = _measure(img, args)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            io.write_report(fh, rows)
    else:
        io.write_report(sys.stdout, rows)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _resolve(args)
    deconv_method(cfg.method)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: Dict[str, float] = {}
    t = time.perf_counter()
    if args.input:
        vol = io.read_pav1(args.input)
    else:
        vol = _simulate(cfg)
        io.write_pav1(out_dir / "raw.pav1", vol)
    timings["simulate"] = time.perf_counter() - t
    raw_map = map_projection(vol)
    _write_image(out_dir / "map_raw", raw_map.pixels)

    t = time.perf_counter()
    sv = saft.run_saft(vol, cfg.saft_config(), _psf_for(cfg, vol))
    timings["saft"] = time.perf_counter() - t
    io.write_pav1(out_dir / "saft.pav1", sv)
    saft_map = map_projection(sv)
    _write_image(out_dir / "map_saft", saft_map.pixels)

    final = _deconvolve(sv, cfg, out_dir / "deconv", timings)
    rows = []
    for name, img in (("raw", raw_map), ("saft", saft_map), ("deconv", final)):
        try:
            rows.append(("snr", metrics.snr_db(img), "dB", name))
        except ValueError as exc:
            log.warning("snr of %s not available: %s", name, exc)
        if cfg.scene:
            lines = phantom.lines_from_scene(phantom.load_scene(cfg.scene))
            if len(lines) == 2:
                try:
                    d = metrics.min_resolvable_distance(img, lines)
                    rows.append(("min_resolvable_distance", d, "m", name))
                except ValueError as exc:
                    log.warning("resolvability of %s not available: %s", name, exc)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        io.write_report(fh, rows)
    io.write_timing(out_dir / "timing.csv", timings)
    log.info("pipeline finished: %s", ", ".join(f"{k} {v:.2f} s" for k, v in timings.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arpam", description="AR-PAM SAFT and deconvolution toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a scene file into a PAV1 volume")
    p.add_argument("--scene", help="scene file (POINT/LINE lines); empty volume if omitted")
    p.add_argument("--noise-psnr", type=float, help="add white noise at this PSNR (dB)")
    p.add_argument("--noise-seed", type=int)
    p.add_argument("-o", "--output", required=True)
    _add_geometry(p)
    _add_psf(p)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("saft", help="directional SAFT of a PAV1 volume")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _add_saft(p)
    _add_psf(p)
    _add_common(p)
    p.set_defaults(func=cmd_saft)

    p = sub.add_parser("deconv", help="deconvolve a MAP (or every slice) of a volume or image")
    p.add_argument("input", help="PAV1 volume, 16-bit PGM or CSV matrix")
    p.add_argument("-o", "--output", required=True, help="output prefix (.pgm/.csv appended)")
    p.add_argument("--dx", type=float, help="pitch for 2D inputs (m)")
    p.add_argument("--dy", type=float, help="pitch for 2D inputs (m)")
    p.add_argument("--noise-psnr", type=float, help="with --noise-map: PSNR of MAP noise (dB)")
    p.add_argument("--noise-seed", type=int)
    _add_map_noise(p)
    _add_deconv(p)
    _add_psf(p)
    _add_common(p)
    p.set_defaults(func=cmd_deconv)

    p = sub.add_parser("measure", help="FWHM / SNR / resolvability report as CSV")
    p.add_argument("input", help="PAV1 volume (MAP is measured), PGM or CSV matrix")
    p.add_argument("--out", help="CSV report path (default stdout)")
    p.add_argument("--dx", type=float, help="pitch for 2D inputs (m)")
    p.add_argument("--dy", type=float, help="pitch for 2D inputs (m)")
    _add_measure_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("pipeline", help="simulate -> SAFT -> deconvolve -> measure")
    p.add_argument("--input", help="start from this PAV1 instead of simulating")
    p.add_argument("--scene")
    p.add_argument("--noise-psnr", type=float)
    p.add_argument("--noise-seed", type=int)
    _add_map_noise(p)
    p.add_argument("--out-dir")
    _add_geometry(p)
    _add_psf(p)
    _add_saft(p)
    _add_deconv(p)
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise CliError("missing command (simulate, saft, deconv, measure, pipeline)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        msg = str(exc) or exc.__class__.__name__
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"ERROR: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
