"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 mesh/assembly/solve
failure, 4 acceptance check failure under ``--check``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from .config import ConfigError, PRESETS, load_config, resolve_config

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE, EXIT_CHECK = 0, 2, 3, 4


def _parse_levels(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _apply_set(data: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set: expected key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set: {key} does not name a mapping entry")
    node[parts[-1]] = yaml.safe_load(raw)


def _load(source: str, sets: list[str]):
    if os.path.exists(source):
        try:
            with open(source, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"<file>: invalid YAML: {exc}") from None
        if not sets:
            return load_config(source)
    elif source in PRESETS:
        data = {"preset": source}
    else:
        raise ConfigError(f"<file>: {source!r} is neither a readable file nor a preset name")
    for s in sets:
        _apply_set(data, s)
    return resolve_config(data)


def _write(out: str, name: str, text: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _cmd_run(args) -> int:
    from .postproc import ConvergenceTable
    from .runner import run_case

    cfg = _load(args.config, args.set)
    res = run_case(cfg, out=args.out, export_levels=args.export_levels)
    rep = res.report()
    _write(args.out, "report.json", _dump(rep))
    table = ConvergenceTable()
    first = next(iter(res.samples.values()), None)
    errs = res.errors
    table.add(case=cfg.name, h=res.problem.mesh.element_size(), p=cfg.orders.p, dofs=res.system.info["n_free"],
              eps_res_F=None if errs is None else errs.eps_res_F, eps_res_M=None if errs is None else errs.eps_res_M,
              eps_energy=None, u_ref_sample=None if first is None else first["value"])
    _write(args.out, "table.csv", table.to_csv())
    _write(args.out, "timings.json", _dump(res.timings | {"solver_wall_s": res.solution.wall_time}))
    for name, s in res.samples.items():
        print(f"{name}: {s['value']:.6e}" + (f" (ratio to reference {s['ratio']:.5f})" if "ratio" in s else ""))
    if errs is not None:
        print(f"eps_res_F = {errs.eps_res_F:.4e}, eps_res_M = {errs.eps_res_M:.4e}, energy = {errs.total_energy:.10e}")
    for c in res.checks:
        print(c.line())
    print(f"wrote {os.path.join(args.out, 'report.json')}")
    if args.check and not all(c.passed for c in res.checks):
        return EXIT_CHECK
    return EXIT_OK


def _cmd_study(args) -> int:
    from .runner import run_convergence

    cfg = _load(args.config, args.set)

    def progress(row):
        print(f"p={row['p']} h={row['h']:.4f} dofs={row['dofs']} eps_res_F={row['eps_res_F']:.4e} "
              f"eps_res_M={row['eps_res_M']:.4e} eps_energy={row['eps_energy']}", flush=True)

    res = run_convergence(cfg, progress=progress)
    _write(args.out, "table.csv", res.table.to_csv())
    _write(args.out, "table.json", res.table.to_json() + "\n")
    _write(args.out, "report.json", _dump(res.report()))
    _write(args.out, "timings.json", _dump({"rows": [r["wall_s"] for r in res.table.rows]}))
    for k, v in sorted(res.slopes.items()):
        print(f"slope {k}: {v:.3f}")
    for c in res.checks:
        print(c.line())
    if args.check and not all(c.passed for c in res.checks):
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bulktrace", description="Bulk trace FEM for Reissner-Mindlin shells on all"
                                 " level sets of a function.")
    ap.add_argument("--list-presets", action="store_true", help="print the embedded benchmark presets and exit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command")
    for name, helptext in (("run", "solve one case"), ("study", "run a convergence study")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="YAML case file or preset name")
        p.add_argument("--out", default="bulktrace-out", help="output directory (default: %(default)s)")
        p.add_argument("--check", action="store_true", help="exit with code 4 if an acceptance check fails")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. orders.p=3 (repeatable)")
        if name == "run":
            p.add_argument("--export-levels", type=_parse_levels, default=None, metavar="C1,C2,...",
                           help="write the bulk field and these level surfaces as .vtu")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.list_presets:
        for name, data in PRESETS.items():
            print(f"{name}: {data['description']}")
        return EXIT_OK
    if args.command is None:
        ap.print_help()
        return EXIT_CONFIG
    from .assembly import AssemblyError
    from .levelset import LevelSetError
    from .mesh import MeshError
    from .postproc import PostprocError
    from .shell import MaterialError
    from .solve import SolverError

    try:
        return _cmd_run(args) if args.command == "run" else _cmd_study(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshError, LevelSetError, AssemblyError, SolverError, PostprocError, MaterialError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except MemoryError:
        print("run failed: out of memory; reduce divisions or order", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
