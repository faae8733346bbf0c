"""Command-line interface: compile, simulate, sweep, report, ingest and
selftest subcommands.

Exit codes: 0 success, 1 usage error, 2 compile/ingest error,
3 simulation contract violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dse
from .arch import Topology, derive_config
from .blocks import decompose, validate_blocks
from .dag import binarize, evaluate_reference, require_valid
from .errors import DagError
from .ingest import (parse_json_dag, parse_matrix_market, parse_psdd,
                     random_dag, sptrsv_dag, write_json_dag)
from .isa import decode, encode, read_program, write_program
from .schedule import check_static_hazards, compile_dag
from .simulator import run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_COMPILE = 2
EXIT_SIM = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def load_dag(path: str, as_sptrsv: bool = True):
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".mtx":
        m = parse_matrix_market(text)
        if not as_sptrsv:
            raise DagError("matrix files only convert through --sptrsv")
        return sptrsv_dag(m)
    if p.suffix == ".psdd":
        return parse_psdd(text)
    return parse_json_dag(text)


def _add_arch_args(sp):
    sp.add_argument("--D", type=int, required=True, help="tree depth")
    sp.add_argument("--B", type=int, required=True, help="register banks")
    sp.add_argument("--R", type=int, required=True, help="registers per bank")
    sp.add_argument("--topology", default=Topology.INPUT_XBAR_OUTPUT_PER_LAYER.value,
                    choices=[t.value for t in Topology])
    sp.add_argument("--data-mem-words", type=int, default=131072)


def build_parser() -> _Parser:
    ap = _Parser(prog="dagpu", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("compile", help="compile a DAG to a binary program")
    sp.add_argument("--dag", required=True)
    _add_arch_args(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lambda", dest="fitness_lambda", type=float, default=0.002)
    sp.add_argument("--window", type=int, default=300)
    sp.add_argument("-o", "--output", required=True)

    sp = sub.add_parser("simulate", help="run a compiled program")
    sp.add_argument("--prog", required=True)
    sp.add_argument("--inputs", help="JSON file {node id: value}")
    sp.add_argument("--trace", help="write per-cycle trace JSON here")
    sp.add_argument("-o", "--output", help="write result JSON here (default stdout)")

    sp = sub.add_parser("sweep", help="design-space sweep over the (D,B,R) grid")
    sp.add_argument("--dag", action="append", required=True,
                    help="workload file; repeatable")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--parallel", type=int, default=1)
    sp.add_argument("--grid", help="e.g. 'D=1,2,3;B=8,16,32,64;R=16,32,64,128'")
    sp.add_argument("--weights", help="JSON weights file for the energy proxy")
    sp.add_argument("--freq", type=float, default=3.0e8)

    sp = sub.add_parser("report", help="re-emit charts from a sweep's points.json")
    sp.add_argument("--points", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--freq", type=float, default=3.0e8)
    sp.add_argument("--config", help="D,B,R to report at (default: auto)")

    sp = sub.add_parser("ingest", help="convert a workload to the JSON DAG format")
    sp.add_argument("--input", required=True)
    sp.add_argument("-o", "--output", required=True)

    sub.add_parser("selftest", help="run the built-in oracle battery")
    return ap


def cmd_compile(args) -> int:
    try:
        dag = load_dag(args.dag)
        cfg = derive_config(args.D, args.B, args.R, args.topology,
                            data_mem_words=args.data_mem_words)
        prog = compile_dag(dag, cfg, seed=args.seed,
                           fitness_lambda=args.fitness_lambda, window=args.window)
    except DagError as e:
        print(f"compile error: {e}", file=sys.stderr)
        return EXIT_COMPILE
    write_program(prog, args.output)
    m = prog.meta
    print(json.dumps({
        "instructions": sum(m.counts.values()), "counts": m.counts,
        "predicted_cycles": m.predicted_cycles, "conflicts": m.conflict_count,
        "spill_stores": m.spill_stores, "spill_loads": m.spill_loads,
        "program_bits": prog.bitstream.bit_len,
    }, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        prog = read_program(args.prog)
    except DagError as e:
        print(f"bad program file: {e}", file=sys.stderr)
        return EXIT_COMPILE
    inputs = {}
    if args.inputs:
        doc = json.loads(Path(args.inputs).read_text())
        inputs = {int(k): float(v) for k, v in doc.items()}
    try:
        result = run(prog, inputs, record_trace=bool(args.trace))
    except DagError as e:
        print(f"simulation contract violation: {e}", file=sys.stderr)
        return EXIT_SIM
    if result.hazard_violations:
        print(f"simulation contract violation: {len(result.hazard_violations)} RAW hazards",
              file=sys.stderr)
        return EXIT_SIM
    if prog.write_trace and \
            [(t[0], t[1], t[2]) for t in prog.write_trace] != result.runtime_write_trace:
        print("simulation contract violation: write trace mismatch", file=sys.stderr)
        return EXIT_SIM
    if args.trace:
        Path(args.trace).write_text(json.dumps(result.trace, indent=1))
    doc = json.dumps({
        "outputs": {str(k): v for k, v in sorted(result.outputs.items())},
        "cycles": result.cycles,
        "stats": result.stats,
    }, indent=1, sort_keys=True)
    if args.output:
        Path(args.output).write_text(doc)
    else:
        print(doc)
    return EXIT_OK


def _parse_grid(text: str) -> dict:
    grid = {}
    for part in text.split(";"):
        key, _, vals = part.partition("=")
        grid[key.strip()] = tuple(int(v) for v in vals.split(","))
    for key in ("D", "B", "R"):
        if key not in grid:
            raise DagError(f"grid is missing {key}")
    return grid


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        workloads = {Path(f).stem: load_dag(f) for f in args.dag}
        grid = _parse_grid(args.grid) if args.grid else None
        weights = None
        if args.weights:
            weights = {k: float(v) for k, v in
                       json.loads(Path(args.weights).read_text()).items()
                       if not k.startswith("_")}
        points = dse.sweep(workloads, grid=grid, seeds=tuple(args.seed or (0,)),
                           parallel=args.parallel, freq_hz=args.freq,
                           csv_path=out / "sweep.csv")
    except DagError as e:
        print(f"sweep error: {e}", file=sys.stderr)
        return EXIT_COMPILE
    (out / "points.json").write_text(dse.points_to_json(points))
    dse.report_breakdown(points, out, weights=weights)
    dse.report_throughput(points, args.freq, out)
    print(f"wrote {out / 'sweep.csv'}, points.json and charts")
    return EXIT_OK


def cmd_report(args) -> int:
    points = dse.points_from_json(Path(args.points).read_text())
    config = tuple(int(x) for x in args.config.split(",")) if args.config else None
    dse.report_breakdown(points, args.out, config=config)
    dse.report_throughput(points, args.freq, args.out, config=config)
    print(f"wrote charts to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    try:
        dag = load_dag(args.input)
        require_valid(dag)
    except DagError as e:
        print(f"ingest error: {e}", file=sys.stderr)
        return EXIT_COMPILE
    Path(args.output).write_text(write_json_dag(dag))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    failures = 0

    def check(name: str, ok: bool):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures += 1

    import random as _random
    rng = _random.Random(7)

    cfg = derive_config(2, 16, 32)
    for i in range(3):
        dag = random_dag(200 + 150 * i, arity_max=3, parallelism=12.0, seed=40 + i)
        inputs = {n: 0.9 + 0.2 * rng.random() for n in dag.input_ids()}
        prog = compile_dag(dag, cfg, seed=i)
        result = run(prog, inputs)
        ref = evaluate_reference(dag, inputs)
        ok = all(abs(result.outputs[o] - ref[o]) <= 1e-5 * max(1.0, abs(ref[o]))
                 for o in dag.outputs)
        check(f"end-to-end equality on random DAG {i}", ok)
        check(f"write trace prediction on random DAG {i}",
              [(t[0], t[1], t[2]) for t in prog.write_trace] == result.runtime_write_trace)
        check(f"hazard freedom on random DAG {i}",
              not result.hazard_violations and not check_static_hazards(prog.instrs, cfg))

    dag = random_dag(300, arity_max=4, parallelism=15.0, seed=3)
    bg = decompose(binarize(dag), cfg)
    check("block decomposition validity", validate_blocks(bg, bg.dag, cfg).ok)

    prog = compile_dag(random_dag(120, seed=11), cfg, seed=0)
    check("codec round trip", decode(encode(prog.instrs, cfg), cfg) == prog.instrs)

    print("selftest:", "all passed" if failures == 0 else f"{failures} failures")
    return EXIT_OK if failures == 0 else EXIT_SIM


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    handler = {
        "compile": cmd_compile, "simulate": cmd_simulate, "sweep": cmd_sweep,
        "report": cmd_report, "ingest": cmd_ingest, "selftest": cmd_selftest,
    }[args.cmd]
    return handler(args)


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
