"""Command-line entry point.

Every subcommand accepts ``--config``, ``--seed``, ``--out``, ``--variant``
and ``--device-threads``. Failures exit nonzero with an error JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="overrides the configured seed")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--variant", action="append", help="model variant name (repeatable for ablate)")
    p.add_argument("--device-threads", type=int, help="cap on BLAS/OpenMP threads")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="stmr", description="Hand mesh regression toolkit with spiral-window attention")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    hier = sub.add_parser("hierarchy", help="mesh hierarchy tools")
    hsub = hier.add_subparsers(dest="action", required=True, parser_class=_Parser)
    hb = hsub.add_parser("build", parents=[common], help="simplify the template into a level stack")
    hb.add_argument("--mesh", help="OBJ template (default: synthetic hand template)")
    hb.add_argument("--levels", type=int, default=4, help="number of halvings")
    hb.add_argument("--k", type=int, default=None, help="spiral length (default from model config)")

    spiral = sub.add_parser("spiral", help="spiral table tools")
    ssub = spiral.add_subparsers(dest="action", required=True, parser_class=_Parser)
    sd = ssub.add_parser("dump", parents=[common], help="write the spiral table of a mesh")
    sd.add_argument("--mesh", help="OBJ mesh (default: synthetic hand template)")
    sd.add_argument("--hierarchy", help="hierarchy bundle directory")
    sd.add_argument("--level", type=int, default=0)
    sd.add_argument("--k", type=int, default=9)

    data = sub.add_parser("data", help="synthetic data tools")
    dsub = data.add_subparsers(dest="action", required=True, parser_class=_Parser)
    dg = dsub.add_parser("gen", parents=[common], help="render a synthetic dataset to .npz")
    dg.add_argument("--n", type=int, default=16)
    dg.add_argument("--image-size", type=int, default=None)
    dg.add_argument("--paired", action="store_true")

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--resume", help="checkpoint directory to continue from")
    tr.add_argument("--epochs", type=int)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--export-obj", type=int, default=0, help="also write this many predicted meshes")

    sub.add_parser("ablate", parents=[common], help="train module and decoder variants")

    ex = sub.add_parser("export-obj", parents=[common], help="write a mesh as OBJ")
    ex.add_argument("--checkpoint", help="predict with this checkpoint")
    ex.add_argument("--data", help="dataset .npz (ground truth when no checkpoint is given)")
    ex.add_argument("--index", type=int, default=0)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def _run_config(args):
    from .training import RunConfig, variant_config

    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.variant and args.command != "ablate":
        if len(args.variant) > 1:
            raise CLIError("this command takes a single --variant")
        run = variant_config(run, args.variant[0])
    return run


def _require_out(args) -> Path:
    if not args.out:
        raise CLIError(f"{args.command} needs --out")
    return Path(args.out)


def _print(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_hierarchy(args):
    from .hierarchy import build_hierarchy
    from .mesh_core import load_obj
    from .synthetic import generate_template

    run = _run_config(args)
    out = _require_out(args)
    mesh = load_obj(args.mesh) if args.mesh else generate_template(run.template_seed).mesh
    K = args.k if args.k is not None else run.model_config().K
    h = build_hierarchy(mesh, num_levels=args.levels, K=K)
    h.save(out)
    _print({"counts": h.counts, "K": h.K, "diagnostics": h.diagnostics, "out": str(out)})


def cmd_spiral(args):
    from .hierarchy import MeshHierarchy
    from .mesh_core import load_obj
    from .spiral import build_spiral_table
    from .synthetic import generate_template

    if args.hierarchy:
        table = MeshHierarchy.load(args.hierarchy).spiral_tables[args.level]
    else:
        run = _run_config(args)
        mesh = load_obj(args.mesh) if args.mesh else generate_template(run.template_seed).mesh
        table = build_spiral_table(mesh, args.k)
    if args.out and args.out.endswith(".bin"):
        table.save(args.out)
        _print({"V": table.V, "K": table.K, "out": args.out})
    elif args.out:
        Path(args.out).write_text(table.to_json() + "\n")
        _print({"V": table.V, "K": table.K, "out": args.out})
    else:
        sys.stdout.write(table.to_json() + "\n")


def cmd_data(args):
    from .synthetic import generate_dataset, generate_template, save_dataset, stack_samples

    run = _run_config(args)
    out = _require_out(args)
    size = args.image_size or run.model_config().image_size
    template = generate_template(run.template_seed)
    arrays = stack_samples(generate_dataset(template, args.n, size, args.paired, run.seed))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, arrays)
    _print({"n": args.n, "image_size": size, "paired": args.paired, "out": str(out)})


def cmd_train(args):
    from .training import train

    run = _run_config(args)
    if args.epochs is not None:
        run = replace(run, epochs=args.epochs)
    out = _require_out(args)
    result = train(run, out, resume=args.resume)
    _print({"final": result.final, "out": str(out)})


def cmd_eval(args):
    from .synthetic import load_dataset
    from .training import evaluate

    report = evaluate(args.checkpoint, load_dataset(args.data), args.out, args.export_obj)
    _print(report)


def cmd_ablate(args):
    from .training import DECODER_SWEEP, MODULE_GRID, ablation_run, format_tables

    run = _run_config(args)
    variants = tuple(args.variant) if args.variant else MODULE_GRID + DECODER_SWEEP
    rows = ablation_run(run, variants, args.out)
    sys.stdout.write(format_tables(rows))


def cmd_export(args):
    from .mesh_core import save_obj
    from .synthetic import generate_template, load_dataset
    from .training import load_trained, predict_meshes

    run = _run_config(args)
    out = _require_out(args)
    if args.checkpoint:
        if not args.data:
            raise CLIError("export-obj with --checkpoint needs --data")
        model, setup = load_trained(args.checkpoint)
        images = load_dataset(args.data)["images"][args.index:args.index + 1]
        verts = predict_meshes(model, images)[0][0]
        mesh = setup.template.mesh.with_vertices(verts)
    else:
        template = generate_template(run.template_seed)
        mesh = template.mesh
        if args.data:
            mesh = mesh.with_vertices(load_dataset(args.data)["meshes"][args.index])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_obj(mesh, out)
    _print({"vertices": mesh.n_vertices, "faces": mesh.n_faces, "out": str(out)})


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    report = run_suite(args.seed or 0)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _print(report)
    if not report["passed"]:
        raise CLIError("gradient check failed")


COMMANDS = {"hierarchy": cmd_hierarchy, "spiral": cmd_spiral, "data": cmd_data, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "export-obj": cmd_export, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.device_threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.device_threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except Exception as exc:  # every failure becomes a machine-readable error
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
