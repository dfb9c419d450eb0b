"""Command-line front end.

    npusim compile model.g -o model.prog --tpbs 4
    npusim run model.prog --input x=x.bin --out-dir out/ --trace run.json
    npusim check model.g --seed 7
    npusim check --bundled
    npusim bench

Exit codes: 0 success, 2 bad arguments, 3 the graph will not compile,
4 the machine faulted while running, 5 outputs disagree with the oracle.
"""

from __future__ import annotations

import argparse
import os
import sys
from importlib import resources
from typing import Dict, List, Optional

import numpy as np

from npusim.bench import format_table, run_suite
from npusim.compiler import compile_graph, load_program_file, save_program
from npusim.config import MachineConfig, TensorDesc, load_config
from npusim.engine import run_compiled
from npusim.errors import SimError, SimFault
from npusim.graph import load_graph_file
from npusim.oracle import compare, random_inputs, run_graph

USAGE, COMPILE, FAULT, MISMATCH = 2, 3, 4, 5


def _machine(args) -> MachineConfig:
    return load_config(args.machine) if args.machine else MachineConfig()


def _random_blobs(input_map: Dict[str, TensorDesc], seed: int,
                  skip: set) -> Dict[str, bytes]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, desc in input_map.items():
        if name in skip:
            continue
        dt = np.dtype(desc.dtype.np_dtype)
        if dt.kind in "iu":
            info = np.iinfo(dt)
            a = rng.integers(info.min, info.max + 1, desc.shape)
        else:
            a = rng.standard_normal(desc.shape)
        out[name] = a.astype(dt).tobytes()
    return out


def cmd_compile(args) -> int:
    try:
        cfg = _machine(args)
        ir = load_graph_file(args.graph)
        prog = compile_graph(ir, cfg, tpbs=args.tpbs, chunks=args.chunks,
                             optimize=not args.no_optimize)
    except SimError as e:
        print(f"compile failed: {e}", file=sys.stderr)
        return COMPILE
    save_program(args.output, prog)
    n = len(prog.instructions) + sum(len(d) for d in prog.dma)
    print(f"{args.output}: {n} instructions, "
          f"estimate {prog.meta.get('estimate', '?')} cycles")
    return 0


def cmd_run(args) -> int:
    try:
        cfg = _machine(args)
        prog = load_program_file(args.program, cfg)
    except (OSError, SimError) as e:
        print(f"cannot load program: {e}", file=sys.stderr)
        return USAGE
    blobs: Dict[str, bytes] = {}
    for item in args.input or []:
        name, _, path = item.partition("=")
        if not path:
            print(f"--input wants name=file, got {item!r}", file=sys.stderr)
            return USAGE
        with open(path, "rb") as fh:
            blobs[name] = fh.read()
    needed = set(prog.input_map) - set(prog.preload_bytes)
    if args.random_inputs is not None:
        filled = _random_blobs(prog.input_map, args.random_inputs,
                               set(blobs) | set(prog.preload_bytes))
        blobs.update(filled)
    missing = needed - set(blobs)
    if missing:
        print(f"missing inputs: {', '.join(sorted(missing))} "
              "(pass --input or --random-inputs)", file=sys.stderr)
        return USAGE
    try:
        res = run_compiled(cfg, prog, blobs)
    except SimError as e:
        print(f"machine fault: {type(e).__name__}: {e}", file=sys.stderr)
        return FAULT
    print(f"makespan {res.makespan} cycles")
    for cycle, source, code in res.interrupts:
        if code != "end-of-task":   # routine completion, not news
            print(f"interrupt @{cycle} {source}: {code}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for name, arr in res.outputs.items():
            desc = prog.output_map[name]
            base = os.path.join(args.out_dir, name)
            with open(base + ".bin", "wb") as fh:
                fh.write(arr.tobytes())
            with open(base + ".desc", "w") as fh:
                fh.write(desc.short() + "\n")
            print(f"{name}: {arr.nbytes} bytes -> {base}.bin")
    if args.trace:
        res.trace.emit(args.trace)
        print(f"trace -> {args.trace}")
    return 0


def _bundled_graphs() -> List:
    root = resources.files("npusim") / "graphs"
    return sorted(root.iterdir(), key=lambda p: p.name)


def _check_one(path, cfg, args) -> int:
    try:
        ir = load_graph_file(str(path))
        prog = compile_graph(ir, cfg, tpbs=args.tpbs, chunks=args.chunks)
    except SimError as e:
        print(f"{path}: compile failed: {e}", file=sys.stderr)
        return COMPILE
    ins = random_inputs(ir, args.seed)
    want = run_graph(ir, ins)
    try:
        res = run_compiled(cfg, prog,
                           {k: v.tobytes() for k, v in ins.items()})
    except SimFault as e:
        print(f"{path}: machine fault: {type(e).__name__}: {e}",
              file=sys.stderr)
        return FAULT
    worst = 0
    for name, desc in prog.output_map.items():
        got = res.outputs[name].reshape(ir.nodes[name].shape)
        ok, err = compare(got, want[name], desc.dtype.tag)
        print(f"{path}: {name} {'ok' if ok else 'MISMATCH'} (err {err:.2e})")
        if not ok:
            worst = MISMATCH
    return worst


def cmd_check(args) -> int:
    cfg = _machine(args)
    if args.bundled:
        paths = _bundled_graphs()
        if not paths:
            print("no bundled graphs found", file=sys.stderr)
            return USAGE
    elif args.graph:
        paths = [args.graph]
    else:
        print("pass a graph file or --bundled", file=sys.stderr)
        return USAGE
    worst = 0
    for p in paths:
        worst = max(worst, _check_one(p, cfg, args))
    return worst


def cmd_bench(args) -> int:
    cfg = load_config(args.machine) if args.machine else None
    print(format_table(run_suite(cfg)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="npusim",
        description="compile and simulate dataflow graphs for the NPU model")
    sub = ap.add_subparsers(dest="command", required=True)

    def machine_opt(p):
        p.add_argument("--machine", metavar="FILE",
                       help="key=value machine description (default build)")

    c = sub.add_parser("compile", help="lower a graph to a program file")
    c.add_argument("graph")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--tpbs", type=int, default=4)
    c.add_argument("--chunks", type=int, default=None)
    c.add_argument("--no-optimize", action="store_true")
    machine_opt(c)
    c.set_defaults(fn=cmd_compile)

    r = sub.add_parser("run", help="execute a compiled program")
    r.add_argument("program")
    r.add_argument("--input", action="append", metavar="NAME=FILE")
    r.add_argument("--random-inputs", type=int, metavar="SEED")
    r.add_argument("--out-dir")
    r.add_argument("--trace", metavar="FILE",
                   help="write a chrome://tracing timeline")
    machine_opt(r)
    r.set_defaults(fn=cmd_run)

    k = sub.add_parser("check", help="compile, run, compare to the oracle")
    k.add_argument("graph", nargs="?")
    k.add_argument("--bundled", action="store_true",
                   help="check every example graph shipped in the package")
    k.add_argument("--tpbs", type=int, default=4)
    k.add_argument("--chunks", type=int, default=None)
    k.add_argument("--seed", type=int, default=0)
    machine_opt(k)
    k.set_defaults(fn=cmd_check)

    b = sub.add_parser("bench", help="run the reference micro-benchmarks")
    machine_opt(b)
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
