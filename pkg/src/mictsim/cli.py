"""Command line interface.

    mictsim run <scenario.xml> -o <dir> [--snapshot-every N] [--deterministic]
    mictsim validate --simulated <surface.obj> --segmented <mask.mhd|surface.obj>
                     [--simulated-mask <mask.mhd>] [--report out.json]
    mictsim cdm validate <library.xml>
    mictsim serve [--host H] [--port P] [--data-root DIR] [--workers N]

Exit codes: 0 success, 2 validation failure, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3


def _cmd_run(args) -> int:
    from .bioheat import SolverError
    from .runner import RunnerError, RunRequest, run
    from .scenario import ScenarioValidationError

    try:
        result = run(RunRequest(
            scenario=args.scenario, outdir=args.output,
            snapshot_every=args.snapshot_every,
            deterministic=args.deterministic))
    except ScenarioValidationError as exc:
        for f in exc.failures:
            print(f"scenario: {f}", file=sys.stderr)
        return EXIT_VALIDATION
    except RunnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        print(f"solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps({
        "outdir": result.outdir,
        "simulated_s": result.simulated_s,
        "wall_clock_s": round(result.wall_clock_s, 3),
        "lesion_volume_ml": round(result.lesion_volume_ml, 6),
    }, indent=2))
    return EXIT_OK


def _load_surface_or_mask(path):
    from .surfaces import read_obj
    from .volio import read_volume
    if path.endswith(".obj"):
        return read_obj(path), None
    grid, values = read_volume(path)
    from .grid import LabelMask, ScalarField
    from .surfaces import extract_isosurface
    mask = LabelMask(grid, (values > 0).astype("uint8"), {1: "lesion"})
    surface = extract_isosurface(
        ScalarField(grid, (values > 0).astype(float)), 0.5)
    return surface, mask


def _cmd_validate(args) -> int:
    from .validation import ValidationError, minimize_alpha, report_to_dict

    try:
        sim_surface, sim_mask = _load_surface_or_mask(args.simulated)
        seg_surface, seg_mask = _load_surface_or_mask(args.segmented)
        if args.simulated_mask:
            _, sim_mask = _load_surface_or_mask(args.simulated_mask)
        report = minimize_alpha(seg_surface, sim_surface,
                                segmented_mask=seg_mask,
                                simulated_mask=sim_mask)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    payload = report_to_dict(report)
    text = json.dumps(payload, indent=2)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    print(text)
    alpha = payload["alpha_mm"]
    phi = payload["phi"]
    print(f"alpha = {alpha:.3g} mm"
          + (f", phi_S = {phi:.3g}" if phi is not None else ""),
          file=sys.stderr)
    return EXIT_OK


def _cmd_cdm_validate(args) -> int:
    from .cdm import CdmError, load_library

    try:
        library = load_library(args.library)
    except (CdmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    problems = library.validate()
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_VALIDATION
    counts = {kind: len(library.by_kind(kind)) for kind in
              ("numerical-model", "equipment", "organ", "protocol")}
    print(json.dumps({"components": counts,
                      "rules": len(library.rules), "ok": True}))
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(args.data_root, workers=args.workers)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mictsim",
        description="Minimally invasive cancer treatment simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("-o", "--output", required=True)
    p_run.add_argument("--snapshot-every", type=float, default=None)
    p_run.add_argument("--deterministic", action="store_true", default=True)
    p_run.add_argument("--no-deterministic", dest="deterministic",
                       action="store_false")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="compare lesions")
    p_val.add_argument("--simulated", required=True,
                       help="simulated lesion (.obj surface or .mhd mask)")
    p_val.add_argument("--segmented", required=True,
                       help="segmented lesion (.obj surface or .mhd mask)")
    p_val.add_argument("--simulated-mask", default=None)
    p_val.add_argument("--report", default=None)
    p_val.set_defaults(func=_cmd_validate)

    p_cdm = sub.add_parser("cdm", help="component library tools")
    cdm_sub = p_cdm.add_subparsers(dest="cdm_command", required=True)
    p_cdmv = cdm_sub.add_parser("validate")
    p_cdmv.add_argument("library")
    p_cdmv.set_defaults(func=_cmd_cdm_validate)

    p_srv = sub.add_parser("serve", help="run the planning service")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8008)
    p_srv.add_argument("--data-root", default="./mictsim-data")
    p_srv.add_argument("--workers", type=int, default=2)
    p_srv.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
