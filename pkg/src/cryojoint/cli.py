"""Command-line front end: ``cryojoint <subcommand> ...``.

Exit codes: 0 success (stalls included), 2 usage or configuration error,
3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import fields

import numpy as np

from . import io as cio
from .admm import CG_METHODS, AdmmConfig
from .forward import build_psi_tables
from .joint import JointConfig, NumericalFailure, half_split_refine, joint_refine, postprocess
from .metrics import COMPONENTS, fsc, fsc_to_csv, histogram_to_csv, pose_error_pdf, resolution_at_threshold
from .refine import METHODS, GdConfig, refine_latents_batched
from .simulate import SNR_MODES, SimConfig, generate_dataset, make_phantom, perturb_poses_init1, synthesize

log = logging.getLogger("cryojoint")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------------------- configuration

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 8},
                "P": _POS_INT,
                "m": {"anyOf": [_POS_INT, {"type": "null"}]},
                "m_t": _NONNEG,
                "snr_db": {"anyOf": [_NUM, {"enum": ["inf", "+inf"]}]},
                "snr_mode": {"enum": list(SNR_MODES)},
                "seed": _NONNEG_INT,
                "psf_sigma": _NONNEG,
                "amplitude": _POS,
                "e_theta": _NONNEG,
                "init_seed": _NONNEG_INT,
            },
        },
        "admm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": {"anyOf": [_NONNEG, {"type": "null"}]},
                "rho": {"anyOf": [_POS, {"type": "null"}]},
                "k_admm": _POS_INT,
                "cg_iters": _POS_INT,
                "cg_tol": _POS,
                "cg_method": {"enum": list(CG_METHODS)},
            },
        },
        "gd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha_theta0": _POS,
                "alpha_t0": _POS,
                "eta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "k_gd": _NONNEG_INT,
                "max_backtracks": _NONNEG_INT,
                "method": {"enum": list(METHODS)},
            },
        },
        "joint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_outer_iters": _POS_INT,
                "half_split": {"type": "boolean"},
                "fsc_stall_patience": _POS_INT,
                "batch_size": _POS_INT,
                "fsc_threshold": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                "postprocess_threshold": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
            },
        },
    },
}

# simulation extras that are not SimConfig fields
SIM_EXTRAS = {"e_theta": 0.2, "init_seed": 7}


def default_config() -> dict:
    sim = {f.name: getattr(SimConfig(), f.name) for f in fields(SimConfig)}
    sim.update(SIM_EXTRAS)
    joint = {k: getattr(JointConfig(), k) for k in CONFIG_SCHEMA["properties"]["joint"]["properties"]}
    return {
        "sim": sim,
        "admm": {f.name: getattr(AdmmConfig(), f.name) for f in fields(AdmmConfig)},
        "gd": {f.name: getattr(GdConfig(), f.name) for f in fields(GdConfig)},
        "joint": joint,
    }


def validate_config(doc) -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid configuration at {where}: {exc.message}") from None


def _parse_snr(v):
    if isinstance(v, str):
        s = v.strip().lower()
        if s in ("inf", "+inf"):
            return math.inf
        try:
            return float(s)
        except ValueError:
            raise UsageError(f"cannot parse SNR value {v!r}") from None
    return float(v)


# flag name -> (section, key, type)
FLAGS = {
    "n": ("sim", "n", int),
    "P": ("sim", "P", int),
    "m": ("sim", "m", int),
    "m-t": ("sim", "m_t", float),
    "snr": ("sim", "snr_db", str),
    "snr-mode": ("sim", "snr_mode", str),
    "seed": ("sim", "seed", int),
    "psf-sigma": ("sim", "psf_sigma", float),
    "amplitude": ("sim", "amplitude", float),
    "e-theta": ("sim", "e_theta", float),
    "init-seed": ("sim", "init_seed", int),
    "lam": ("admm", "lam", float),
    "rho": ("admm", "rho", float),
    "k-admm": ("admm", "k_admm", int),
    "cg-iters": ("admm", "cg_iters", int),
    "cg-tol": ("admm", "cg_tol", float),
    "cg-method": ("admm", "cg_method", str),
    "alpha-theta0": ("gd", "alpha_theta0", float),
    "alpha-t0": ("gd", "alpha_t0", float),
    "eta": ("gd", "eta", float),
    "k-gd": ("gd", "k_gd", int),
    "max-backtracks": ("gd", "max_backtracks", int),
    "gd-method": ("gd", "method", str),
    "max-outer-iters": ("joint", "max_outer_iters", int),
    "fsc-stall-patience": ("joint", "fsc_stall_patience", int),
    "batch-size": ("joint", "batch_size", int),
    "fsc-threshold": ("joint", "fsc_threshold", float),
    "postprocess-threshold": ("joint", "postprocess_threshold", float),
}

SIM_FLAGS = [k for k, v in FLAGS.items() if v[0] == "sim"]
SOLVER_FLAGS = [k for k, v in FLAGS.items() if v[0] != "sim"]


def load_config(path: str | None, args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags; validated."""
    cfg = default_config()
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON: {exc}") from None
        validate_config(doc)
        for section, values in doc.items():
            cfg[section].update(values)
    for flag, (section, key, _) in FLAGS.items():
        v = getattr(args, flag.replace("-", "_"), None)
        if v is not None:
            cfg[section][key] = v
    if getattr(args, "half_split", False):
        cfg["joint"]["half_split"] = True
    cfg["sim"]["snr_db"] = _parse_snr(cfg["sim"]["snr_db"])
    doc = copy.deepcopy(cfg)
    if math.isinf(doc["sim"]["snr_db"]):
        if doc["sim"]["snr_db"] < 0:
            raise UsageError("SNR of -inf is not meaningful")
        doc["sim"]["snr_db"] = "+inf"
    validate_config(doc)
    return cfg


def sim_config(cfg: dict) -> SimConfig:
    return SimConfig(**{k: v for k, v in cfg["sim"].items() if k not in SIM_EXTRAS})


def joint_config(cfg: dict, sigma: float, threads: int) -> JointConfig:
    return JointConfig(admm=AdmmConfig(**cfg["admm"]), gd=GdConfig(**cfg["gd"]), sigma=sigma, threads=threads, **cfg["joint"])


def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("CRYOJOINT_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"CRYOJOINT_THREADS must be an integer, got {env!r}") from None
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise UsageError(f"thread count must be >= 1, got {value}")
    try:
        import numba

        numba.set_num_threads(min(value, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass
    return value


# ----------------------------------------------------------------------------- helpers


def _prepare_out(out_dir: str, names: list[str], overwrite: bool) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"{out_dir} is not writable")
    if not overwrite:
        clash = [n for n in names if os.path.exists(os.path.join(out_dir, n))]
        if clash:
            raise FileExistsError(f"{out_dir}: {', '.join(clash)} exist; pass --overwrite to replace")


def _write_volume_pair(out_dir: str, stem: str, c: np.ndarray, basis, voxel: float) -> None:
    cio.write_mrc(os.path.join(out_dir, f"{stem}_coeffs.mrc"), c, voxel, label=f"cryojoint KBWF coefficients a={basis.a:g} alpha={basis.alpha:g} m={basis.m}")
    cio.write_mrc(os.path.join(out_dir, f"{stem}.mrc"), synthesize(c, basis), voxel, label="cryojoint density")


def _read_coeffs(path: str, n: int | None = None) -> np.ndarray:
    c, _ = cio.read_volume(path)
    if n is not None and c.shape[0] != n:
        raise UsageError(f"{path}: volume side {c.shape[0]} does not match n={n}")
    return c


def _stack_tables(meta: dict, m: int, psf_sigma: float | None = None):
    sim = SimConfig(n=max(8, int(meta.get("n", m))), m=m, psf_sigma=float(meta.get("psf_sigma", 0.0) if psf_sigma is None else psf_sigma))
    return build_psi_tables(psf=sim.psf, grid=sim.detector)


def _write_timing(path: str, trace) -> None:
    cio.write_json(path, {"seconds": [r.seconds for r in trace.records]})


# ----------------------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args)
    sc = sim_config(cfg)
    out = args.out
    names = [cio.STACK_FILES[k] for k in ("images", "poses", "meta")] + ["ground_truth_coeffs.mrc", "ground_truth.mrc", "init_poses.csv"]
    _prepare_out(out, names, args.overwrite)
    phantom = make_phantom(sc.n, seed=sc.seed, amplitude=sc.amplitude)
    tables = build_psi_tables(psf=sc.psf, grid=sc.detector)
    ds = generate_dataset(phantom.coeffs, sc, tables)
    init = perturb_poses_init1(ds.true_poses, cfg["sim"]["e_theta"], cfg["sim"]["init_seed"])
    snr = ds.measured_snr()
    meta = {
        "n": sc.n,
        "P": sc.P,
        "m": tables.grid.m,
        "pixel_size": 1.0,
        "sampling": [tables.grid.delta1, tables.grid.delta2],
        "snr_db": "+inf" if math.isinf(sc.snr_db) else sc.snr_db,
        "snr_mode": sc.snr_mode,
        "snr_achieved_db": "+inf" if math.isinf(snr) else 10.0 * math.log10(snr),
        "sigma": ds.sigma,
        "clean_energy": ds.clean_energy,
        "seed": sc.seed,
        "m_t": sc.m_t,
        "psf_sigma": sc.psf_sigma,
        "amplitude": sc.amplitude,
        "e_theta": cfg["sim"]["e_theta"],
        "init_seed": cfg["sim"]["init_seed"],
        "basis": tables.basis.to_dict(),
        "phantom_fit_residual": phantom.fit_residual,
    }
    cio.write_stack(out, ds.images, ds.true_poses, meta, true_poses=ds.true_poses)
    cio.write_pose_table(os.path.join(out, "init_poses.csv"), init, ds.true_poses)
    _write_volume_pair(out, "ground_truth", phantom.coeffs, tables.basis, 1.0)
    print(f"simulated {sc.P} images of {tables.grid.m}x{tables.grid.m}, sigma={ds.sigma:.6g}, SNR={meta['snr_achieved_db']} dB ({sc.snr_mode})")
    return EXIT_OK


def _load_inputs(args):
    stack = cio.read_stack(args.stack, args.poses)
    m = stack.images.shape[1]
    n = int(stack.meta.get("n", m))
    tables = _stack_tables(stack.meta, m)
    c0 = _read_coeffs(args.init_volume, n) if getattr(args, "init_volume", None) else np.zeros((n, n, n))
    gt = _read_coeffs(args.ground_truth, n) if getattr(args, "ground_truth", None) else None
    sigma = float(stack.meta.get("sigma", 0.0))
    return stack, tables, c0, gt, sigma, n


def _run_joint(args, force_fixed_poses: bool) -> int:
    cfg = load_config(args.config, args)
    if force_fixed_poses:
        cfg["gd"]["k_gd"] = 0
        cfg["joint"]["half_split"] = False
    stack, tables, c0, gt, sigma, n = _load_inputs(args)
    jc = joint_config(cfg, sigma, args.threads)
    P = len(stack.images)
    if jc.half_split and P < 2:
        raise UsageError(f"--half-split needs at least 2 images, the stack has {P}")
    out = args.out
    names = ["volume_coeffs.mrc", "volume.mrc", "poses.csv", "trace.jsonl", "timing.json"]
    _prepare_out(out, names, args.overwrite)
    voxel = float(stack.meta.get("pixel_size", 1.0))
    if jc.half_split:
        res = half_split_refine(stack.images, stack.poses, c0, tables, jc, ground_truth=gt)
        c, poses, trace = res.average, res.poses, res.trace
        _write_volume_pair(out, "half1", res.half1, tables.basis, voxel)
        _write_volume_pair(out, "half2", res.half2, tables.basis, voxel)
        fsc_to_csv(res.fsc, os.path.join(out, "fsc_half.csv"))
        print(f"half-split: stopped at iteration {res.stop_iteration}, best iteration {res.best_iteration}")
    else:
        res = joint_refine(stack.images, stack.poses, c0, tables, jc, ground_truth=gt)
        c, poses, trace = res.c, res.poses, res.trace
    _write_volume_pair(out, "volume", c, tables.basis, voxel)
    cio.write_pose_table(os.path.join(out, "poses.csv"), poses, stack.true_poses)
    trace.write(os.path.join(out, "trace.jsonl"))
    _write_timing(os.path.join(out, "timing.json"), trace)
    if gt is not None:
        curve = fsc(synthesize(c, tables.basis), synthesize(gt, tables.basis))
        fsc_to_csv(curve, os.path.join(out, "fsc_ground_truth.csv"))
        r_c = resolution_at_threshold(curve, jc.fsc_threshold)
        print(f"r_c = {r_c:.4f} cycles/voxel ({r_c / curve.nyquist:.1%} of Nyquist)")
    print(f"{len(trace.records)} outer iterations written to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    return _run_joint(args, force_fixed_poses=True)


def cmd_joint(args) -> int:
    return _run_joint(args, force_fixed_poses=False)


def cmd_refine_poses(args) -> int:
    cfg = load_config(args.config, args)
    stack, tables, _, _, _, n = _load_inputs(args)
    c = _read_coeffs(args.volume, n)
    gd = GdConfig(**cfg["gd"])
    _prepare_out(args.out, ["poses.csv", "gd_summary.json"], args.overwrite)
    rr = refine_latents_batched(c, stack.images, stack.poses, tables, gd, cfg["joint"]["batch_size"], args.threads)
    if not np.all(np.isfinite(rr.poses)):
        raise NumericalFailure(0, "poses")
    cio.write_pose_table(os.path.join(args.out, "poses.csv"), rr.poses, stack.true_poses)
    summary = {
        "initial_cost": float(sum(t.initial_cost for t in rr.traces)),
        "final_cost": rr.total_cost,
        "exhausted_line_searches": rr.exhausted,
    }
    cio.write_json(os.path.join(args.out, "gd_summary.json"), summary)
    print(f"cost {summary['initial_cost']:.6g} -> {summary['final_cost']:.6g}")
    return EXIT_OK


def cmd_fsc(args) -> int:
    a, _ = cio.read_volume(args.volume_a)
    b, _ = cio.read_volume(args.volume_b)
    if a.shape != b.shape:
        raise UsageError(f"volume shapes differ: {a.shape} vs {b.shape}")
    curve = fsc(a, b)
    _prepare_out(os.path.dirname(os.path.abspath(args.out)), [os.path.basename(args.out)], args.overwrite)
    fsc_to_csv(curve, args.out)
    r = resolution_at_threshold(curve, args.threshold)
    print(f"FSC = {args.threshold} at {r:.4f} cycles/voxel ({r / curve.nyquist:.1%} of Nyquist)")
    return EXIT_OK


def cmd_pose_error(args) -> int:
    est = cio.read_pose_table(args.estimated)
    if args.true:
        true = cio.read_pose_table(args.true).poses
    elif est.true_poses is not None:
        true = est.true_poses
    else:
        raise UsageError("no true poses: pass --true or a table with _true columns")
    if len(true) != len(est.poses):
        raise UsageError(f"{len(true)} true poses but {len(est.poses)} estimates")
    comps = COMPONENTS if args.component == "all" else (args.component,)
    outs = []
    for comp in comps:
        path = args.out if len(comps) == 1 else _suffixed(args.out, comp)
        outs.append(path)
    _prepare_out(os.path.dirname(os.path.abspath(args.out)), [os.path.basename(p) for p in outs], args.overwrite)
    for comp, path in zip(comps, outs):
        hist = pose_error_pdf(true, est.poses, comp, bins=args.bins, align=args.align, degrees=True)
        histogram_to_csv(hist, path)
    print(f"wrote {', '.join(outs)}")
    return EXIT_OK


def _suffixed(path: str, tag: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_{tag}{ext or '.csv'}"


def cmd_postprocess(args) -> int:
    h1, voxel = cio.read_volume(args.half1)
    h2, _ = cio.read_volume(args.half2)
    if h1.shape != h2.shape:
        raise UsageError(f"half maps differ in shape: {h1.shape} vs {h2.shape}")
    vol = cio.read_volume(args.volume)[0] if args.volume else 0.5 * (h1 + h2)
    if vol.shape != h1.shape:
        raise UsageError(f"volume shape {vol.shape} does not match the half maps {h1.shape}")
    _prepare_out(os.path.dirname(os.path.abspath(args.out)), [os.path.basename(args.out)], args.overwrite)
    curve = fsc(h1, h2)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out, note = postprocess(vol, curve, args.mask_radius, args.threshold)
    cio.write_mrc(args.out, out, voxel, label="cryojoint postprocessed density")
    print(note)
    return EXIT_OK


# ----------------------------------------------------------------------------- parser


def _add_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    g = p.add_argument_group("configuration overrides")
    for name in names:
        _, key, typ = FLAGS[name]
        kw = {"type": typ, "default": None, "dest": name.replace("-", "_")}
        if name == "snr":
            kw["help"] = "SNR in dB, or +inf for noiseless data"
        elif name == "cg-method":
            kw["choices"] = list(CG_METHODS)
        elif name == "gd-method":
            kw["choices"] = list(METHODS)
        elif name == "snr-mode":
            kw["choices"] = list(SNR_MODES)
        g.add_argument(f"--{name}", **kw)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON configuration file (flags override it)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $CRYOJOINT_THREADS or all cores)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cryojoint", description="Joint pose refinement and TV-regularised reconstruction for cryo-EM.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom and a noisy projection stack")
    _common(p)
    p.add_argument("--out", required=True)
    _add_flags(p, SIM_FLAGS)
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in (
        ("reconstruct", cmd_reconstruct, "reconstruct at fixed poses"),
        ("joint", cmd_joint, "alternate volume and pose updates"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--stack", required=True, help="directory written by 'simulate' (or compatible)")
        p.add_argument("--poses", help="pose table to start from (default: the stack's own)")
        p.add_argument("--init-volume", help="initial coefficient volume (default: zeros)")
        p.add_argument("--ground-truth", help="ground-truth coefficient volume for r_c tracking")
        p.add_argument("--out", required=True)
        if name == "joint":
            p.add_argument("--half-split", action="store_true", help="refine two half sets and stop when their FSC stalls")
        _add_flags(p, SOLVER_FLAGS)
        p.set_defaults(func=func)

    p = sub.add_parser("refine-poses", help="one round of pose descent against a fixed volume")
    _common(p)
    p.add_argument("--stack", required=True)
    p.add_argument("--poses")
    p.add_argument("--volume", required=True, help="coefficient volume")
    p.add_argument("--out", required=True)
    _add_flags(p, [f for f in SOLVER_FLAGS if FLAGS[f][0] == "gd"] + ["batch-size"])
    p.set_defaults(func=cmd_refine_poses)

    p = sub.add_parser("fsc", help="Fourier shell correlation of two volumes")
    p.add_argument("volume_a")
    p.add_argument("volume_b")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_fsc, threads=None, config=None)

    p = sub.add_parser("pose-error", help="histogram of pose errors (angles in degrees)")
    p.add_argument("estimated", help="estimated pose table")
    p.add_argument("--true", help="true pose table (default: _true columns of the estimate)")
    p.add_argument("--component", choices=list(COMPONENTS) + ["all"], default="all")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--align", action="store_true", help="remove the best global rotation first")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_pose_error, threads=None, config=None)

    p = sub.add_parser("postprocess", help="mask and low-pass at the half-map FSC threshold")
    p.add_argument("--half1", required=True)
    p.add_argument("--half2", required=True)
    p.add_argument("--volume", help="map to filter (default: average of the halves)")
    p.add_argument("--threshold", type=float, default=0.143)
    p.add_argument("--mask-radius", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_postprocess, threads=None, config=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.func not in (cmd_fsc, cmd_pose_error, cmd_postprocess):
            args.threads = resolve_threads(args.threads)
        return args.func(args)
    except (cio.MrcError, cio.PoseTableError, OSError) as exc:
        print(f"cryojoint: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"cryojoint: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cryojoint: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
