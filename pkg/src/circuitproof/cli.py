"""Batch entry points: synthesis, pipeline stages, evaluation, and serving.

Configuration precedence: command-line flags > config file (``--config``,
key = value text) > environment variable ``VICE_STORE`` (store path only)
> built-in defaults.  Exit codes: 0 success, 1 validation error, 2 I/O
error.  Logs go to standard error; data goes to files or standard output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .detect import BrokenParams, InvalidBranchParams
from .model import (
    BoundsError,
    FormatError,
    NotFoundError,
    ParameterError,
    ValidationError,
)
from .skeletonize import SkeletonParams
from .synapse import DEFAULT_ASSOC_RADIUS_NM, DEFAULT_CLUSTER_RADIUS_NM
from .synthetic import GenerationError

logger = logging.getLogger("circuitproof")

STORE_ENV_VAR = "VICE_STORE"

DEFAULTS = {
    "invalidation_scale": 3.0,
    "invalidation_const": 200.0,
    "min_branch_len": 300.0,
    "assoc_radius": DEFAULT_ASSOC_RADIUS_NM,
    "radius": DEFAULT_CLUSTER_RADIUS_NM,
    "window": 10,
    "window_xy": 129,
    "rho": 750.0,
    "cos_thresh": -0.5,
    "overhang": 100.0,
    "min_overhang_voxels": 10,
    "threshold": 115,
    "bridge_slices": 3,
    "port": 8077,
    "host": "127.0.0.1",
    "seed": 0,
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is usage + exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, 1)


def _add(parser, name, key, **kwargs):
    default = DEFAULTS[key]
    help_text = kwargs.pop("help", "")
    parser.add_argument(
        name, default=None, help=f"{help_text} (default: {default})", **kwargs
    )


def _load_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    config: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", 2) from exc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"bad config line {line!r}", 1)
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return config


def _resolve(args_value, config: dict, key: str, cast, default):
    if args_value is not None:
        return args_value
    if key in config:
        try:
            return cast(config[key])
        except ValueError as exc:
            raise CliError(f"config {key}: {exc}", 1) from exc
    return default


def _resolve_store(args, config: dict) -> str:
    store = args.store if getattr(args, "store", None) else None
    store = store or config.get("store") or os.environ.get(STORE_ENV_VAR)
    if not store:
        raise CliError(
            f"no store given: use --store, a config file, or ${STORE_ENV_VAR}", 1
        )
    return store


def build_parser() -> _Parser:
    parser = _Parser(prog="circuitproof", description=__doc__)
    parser.add_argument("--config", default=None, help="key = value configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset with ground truth",
                       formatter_class=argparse.HelpFormatter)
    p.add_argument("--spec", required=True, help="synthetic spec file (key = value)")
    _add(p, "--seed", "seed", type=int, help="random seed")
    p.add_argument("--out", required=True, help="output directory (base/ and truth/ stores)")

    p = sub.add_parser("skeletonize", help="extract center-line trees per object")
    p.add_argument("--store", default=None, help="store directory")
    p.add_argument("--cell", type=int, default=None, help="single object id (default: all)")
    _add(p, "--invalidation-scale", "invalidation_scale", type=float,
         help="invalidation radius multiple of the local DBF")
    _add(p, "--invalidation-const", "invalidation_const", type=float,
         help="additive invalidation radius, nm")
    _add(p, "--min-branch-len", "min_branch_len", type=float,
         help="prune leaf branches shorter than this, nm")

    p = sub.add_parser("associate", help="anchor synaptic elements to skeleton nodes")
    p.add_argument("--store", default=None, help="store directory")
    p.add_argument("--synapses", default=None, help="synapse table (default: STORE/synapses.txt)")
    _add(p, "--assoc-radius", "assoc_radius", type=float,
         help="max anchor distance for background elements, nm")

    p = sub.add_parser("cluster", help="form and sort synapse clusters per cell")
    p.add_argument("--store", default=None, help="store directory")
    _add(p, "--radius", "radius", type=float, help="traversal interval and gather radius, nm")

    p = sub.add_parser("detect", help="run all error detectors; writes rois.txt")
    p.add_argument("--store", default=None, help="store directory")
    _add(p, "--window", "window", type=int, help="sliding window depth, slices")
    _add(p, "--window-xy", "window_xy", type=int, help="sliding window cross-section, voxels")
    _add(p, "--rho", "rho", type=float, help="radial synapse check distance, nm")
    _add(p, "--cos-thresh", "cos_thresh", type=float,
         help="flag children with dot(child, stem) below this")
    _add(p, "--overhang", "overhang", type=float, help="minimum mask overhang past an endpoint, nm")
    _add(p, "--min-overhang-voxels", "min_overhang_voxels", type=int,
         help="minimum foreign voxels in the overhang")
    _add(p, "--threshold", "threshold", type=int, help="mask extractor image threshold")
    _add(p, "--bridge-slices", "bridge_slices", type=int,
         help="mask extractor gap closing along the slice axis, slices")

    p = sub.add_parser("eval", help="evaluation commands")
    esub = p.add_subparsers(dest="eval_command", required=True)
    pe = esub.add_parser("ari", help="adapted Rand error between two label stores")
    pe.add_argument("--pred", required=True, help="predicted store directory")
    pe.add_argument("--gt", required=True, help="ground truth store directory")
    pe = esub.add_parser("loop", help="synthetic generate-detect-correct loop")
    pe.add_argument("--spec", required=True, help="synthetic spec file")
    _add(pe, "--seed", "seed", type=int, help="random seed")

    p = sub.add_parser("serve", help="serve the circuit graph over HTTP")
    p.add_argument("--store", default=None, help="store directory")
    _add(p, "--port", "port", type=int, help="listen port")
    _add(p, "--host", "host", help="bind address")
    _add(p, "--assoc-radius", "assoc_radius", type=float, help="association radius, nm")
    _add(p, "--radius", "radius", type=float, help="cluster radius, nm")

    return parser


def _cmd_synth(args, config) -> int:
    from .synthetic import generate_synthetic, load_spec

    spec = load_spec(args.spec)
    seed = _resolve(args.seed, config, "seed", int, DEFAULTS["seed"])
    result = generate_synthetic(spec, seed, args.out)
    logger.info(
        "synthesized %d tubes, %d synapses -> %s",
        spec.tube_count, len(result.synapses), args.out,
    )
    return 0


def _cmd_skeletonize(args, config) -> int:
    from .pipeline import run_skeletonize

    store = _resolve_store(args, config)
    params = SkeletonParams(
        invalidation_scale=_resolve(args.invalidation_scale, config, "invalidation_scale",
                                    float, DEFAULTS["invalidation_scale"]),
        invalidation_const_nm=_resolve(args.invalidation_const, config, "invalidation_const",
                                       float, DEFAULTS["invalidation_const"]),
        min_branch_len_nm=_resolve(args.min_branch_len, config, "min_branch_len",
                                   float, DEFAULTS["min_branch_len"]),
    )
    ids = run_skeletonize(store, cell=args.cell, params=params)
    logger.info("skeletonized %d object(s) in %s", len(ids), store)
    return 0


def _cmd_associate(args, config) -> int:
    from .pipeline import run_associate

    store = _resolve_store(args, config)
    radius = _resolve(args.assoc_radius, config, "assoc_radius", float, DEFAULTS["assoc_radius"])
    _, summary = run_associate(store, args.synapses, radius)
    logger.info(
        "anchored %d elements; %d left unanchored",
        summary.anchored, len(summary.unanchored_element_ids),
    )
    return 0


def _cmd_cluster(args, config) -> int:
    from .pipeline import run_cluster

    store = _resolve_store(args, config)
    radius = _resolve(args.radius, config, "radius", float, DEFAULTS["radius"])
    counts = run_cluster(store, radius)
    logger.info("clustered %d cell(s): %s", len(counts), counts)
    return 0


def _cmd_detect(args, config) -> int:
    from .detect import default_mask_extractor
    from .pipeline import run_detect

    store = _resolve_store(args, config)
    broken = BrokenParams(
        window_slices=_resolve(args.window, config, "window", int, DEFAULTS["window"]),
        window_xy=_resolve(args.window_xy, config, "window_xy", int, DEFAULTS["window_xy"]),
        overhang_nm=_resolve(args.overhang, config, "overhang", float, DEFAULTS["overhang"]),
        min_overhang_voxels=_resolve(args.min_overhang_voxels, config, "min_overhang_voxels",
                                     int, DEFAULTS["min_overhang_voxels"]),
    )
    invalid = InvalidBranchParams(
        cos_threshold=_resolve(args.cos_thresh, config, "cos_thresh", float, DEFAULTS["cos_thresh"])
    )
    extractor = default_mask_extractor(
        threshold=_resolve(args.threshold, config, "threshold", int, DEFAULTS["threshold"]),
        bridge_slices=_resolve(args.bridge_slices, config, "bridge_slices", int,
                               DEFAULTS["bridge_slices"]),
    )
    rho = _resolve(args.rho, config, "rho", float, DEFAULTS["rho"])
    rois = run_detect(store, extractor=extractor, broken=broken, rho_nm=rho, invalid=invalid)
    logger.info("detected %d ROI(s) in %s", len(rois), store)
    return 0


def _cmd_eval(args, config) -> int:
    if args.eval_command == "ari":
        from .evaluation import adapted_rand_error
        from .store import open_store

        pred = open_store(args.pred).read_full("labels")
        gt = open_store(args.gt).read_full("labels")
        print(f"{adapted_rand_error(pred, gt):.6f}")
        return 0
    if args.eval_command == "loop":
        from .evaluation import render_report_csv, render_report_text, run_synthetic_loop
        from .synthetic import load_spec

        spec = load_spec(args.spec)
        seed = _resolve(args.seed, config, "seed", int, DEFAULTS["seed"])
        report = run_synthetic_loop(spec, seed)
        logger.info(
            "loop: %d ROI(s), %d correction(s)", report.roi_count, report.corrected_count
        )
        rows = [("synthetic", report.pre_are, report.post_are)]
        print(render_report_text(rows), end="")
        print(render_report_csv(rows), end="", file=sys.stderr)
        return 0
    raise CliError(f"unknown eval command {args.eval_command!r}", 1)


def _cmd_serve(args, config) -> int:
    import uvicorn

    from .service import create_app

    store = _resolve_store(args, config)
    app = create_app(
        store,
        assoc_radius_nm=_resolve(args.assoc_radius, config, "assoc_radius", float,
                                 DEFAULTS["assoc_radius"]),
        cluster_radius_nm=_resolve(args.radius, config, "radius", float, DEFAULTS["radius"]),
    )
    host = _resolve(args.host, config, "host", str, DEFAULTS["host"])
    port = _resolve(args.port, config, "port", int, DEFAULTS["port"])
    uvicorn.run(app, host=host, port=port, log_level="info")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "skeletonize": _cmd_skeletonize,
    "associate": _cmd_associate,
    "cluster": _cmd_cluster,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, ParameterError, BoundsError, NotFoundError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
