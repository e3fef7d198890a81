"""Command-line front end: y86pp {assemble,disasm,run,translate,verify,dump-tables}.

Exit status is 0 on success, 1 on a domain failure (assembly error, fault,
step bound reached, failed VC) and 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import isa
from .assembler import (AsmError, ImageFormatError, ProgramImage, assemble_text,
                        disassemble, read_image, write_image)
from .cutpoint import trial_rng, verify
from .minvisor import (FUNCTIONS, SAMPLE_PARAMS, SENTINEL, NptParams, enable_nested_paging,
                       format_params, linked_source, parse_params,
                       setup_call)
from .paging import PageFault, dump_tables, va_to_pa
from .specs import trial_factory
from .state import MASK32, ConfigurationError, MachineState, Status

OK, FAILURE, USAGE = 0, 1, 2
LINKED = "@minvisor"  # pseudo source path: the linked shipped routines


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= MASK32:
        raise argparse.ArgumentTypeError(f"out of 32-bit range: {text!r}")
    return value


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        try:
            Path(out).write_text(text)
        except OSError as e:
            raise UsageError(f"cannot write {out}: {e.strerror}") from None


def _load_params(path: Optional[str]) -> NptParams:
    if path is None:
        return SAMPLE_PARAMS
    try:
        return parse_params(_read_text(path)).validate()
    except (ValueError, ConfigurationError) as e:
        raise UsageError(f"{path}: {e}") from None


def _load_image(path: str) -> ProgramImage:
    try:
        return read_image(_read_text(path))
    except ImageFormatError as e:
        raise UsageError(f"{path}: {e}") from None


def _built_tables(p: NptParams) -> MachineState:
    """Run the shipped create_nested_pt binary and return the halted state."""
    s, _ = isa.run(setup_call("create_nested_pt", p), 1_000_000)
    if s.status is not Status.HALTED:
        raise UsageError(f"table construction did not halt: {s.fault or s.status.value}")
    return s


def changed_digest(before: MachineState, after: MachineState) -> tuple[int, str]:
    """(count, sha256) over the sorted (addr, byte) pairs that changed."""
    keys = sorted(a for a in before.memory.keys() | after.memory.keys()
                  if before.memory.get(a, 0) != after.memory.get(a, 0))
    h = hashlib.sha256()
    for a in keys:
        h.update(a.to_bytes(4, "little") + bytes([after.memory.get(a, 0)]))
    return len(keys), h.hexdigest()


def cmd_assemble(args) -> int:
    text = linked_source() if args.source == LINKED else _read_text(args.source)
    try:
        image = assemble_text(text, args.base)
    except AsmError as e:
        print(f"{args.source}: {e}", file=sys.stderr)
        return FAILURE
    _emit(write_image(image), args.out)
    return OK


def cmd_disasm(args) -> int:
    _emit(disassemble(_load_image(args.image)), args.out)
    return OK


def _entry_function(image: ProgramImage, wanted: Optional[str]) -> str:
    if wanted is not None:
        if wanted not in image.symbols:
            raise UsageError(f"image has no symbol {wanted!r}")
        return wanted
    present = [f for f in FUNCTIONS if f in image.symbols]
    if not present:
        raise UsageError("image defines none of: " + ", ".join(FUNCTIONS))
    return present[-1]


def cmd_run(args) -> int:
    image = _load_image(args.image)
    if SENTINEL not in image.symbols:
        raise UsageError(f"image lacks the {SENTINEL} return target; "
                         f"assemble {LINKED} or include (:{SENTINEL} (halt))")
    p = _load_params(args.params)
    fn = _entry_function(image, args.function)
    try:
        s0 = setup_call(fn, p, image=image)
    except (ConfigurationError, ValueError) as e:
        raise UsageError(str(e)) from None
    if args.trace:
        s1, n = isa.run_traced(s0, args.max_steps, print)
    else:
        s1, n = isa.run(s0, args.max_steps)
    count, digest = changed_digest(s0, s1)
    if s1.status is Status.RUNNING:
        status = "Inconclusive (step bound reached)"
    else:
        status = s1.status.value
    print(f"function: {fn}")
    print(f"status: {status}")
    if s1.fault is not None:
        print(f"fault: {s1.fault}")
    print(f"steps: {n}")
    print(f"eax: 0x{s1.gpr[0]:08x}")
    print(f"changed bytes: {count} sha256={digest}")
    return OK if s1.status is Status.HALTED else FAILURE


def cmd_translate(args) -> int:
    p = _load_params(args.params)
    s = _built_tables(p)
    if not args.paging_off:
        s = enable_nested_paging(s, p.pdpt_base)
    for addr in args.addresses:
        out = va_to_pa(addr, s)
        if isinstance(out, PageFault):
            print(f"0x{addr:08x} -> FAULT({out.level})")
        else:
            print(f"0x{addr:08x} -> 0x{out.addr:08x}")
    return OK


def cmd_dump_tables(args) -> int:
    p = _load_params(args.params)
    s = _built_tables(p)
    _emit("\n".join(dump_tables(s, p.pdpt_base)) + "\n", args.out)
    return OK


def cmd_verify(args) -> int:
    if args.spec not in FUNCTIONS:
        raise UsageError(f"unknown spec {args.spec!r}; choose from {', '.join(FUNCTIONS)}")
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    summary = verify(trial_factory(args.spec), args.trials, args.seed, args.spec)
    witnesses = {}
    witness_dir = Path(args.out) if args.out else Path(args.report).parent
    for t, _ in summary.failures:
        if t in witnesses:
            continue
        path = witness_dir / f"witness-{args.spec}-seed{args.seed}-trial{t}.params"
        seed_line = f"# witness: spec={args.spec} seed={args.seed} trial={t}\n"
        _emit(seed_line + format_params(_trial_params(args.spec, args.seed, t)), str(path))
        witnesses[t] = str(path)
    _emit("\n".join(summary.lines() + summary.records(witnesses)) + "\n", args.report)
    for line in summary.lines():
        print(line)
    return OK if summary.all_passed else FAILURE


def _trial_params(fn: str, seed: int, t: int) -> NptParams:
    trial = trial_factory(fn)(trial_rng(seed, t), t)
    return parse_params(trial.witness["params"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="y86pp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("assemble", help="assemble a source file into an image file")
    a.add_argument("source", help=f"source path, or {LINKED} for the linked routines")
    a.add_argument("--base", type=_int, default=SAMPLE_PARAMS.code_base)
    a.add_argument("--out", help="image path (default: stdout)")
    a.set_defaults(func=cmd_assemble)

    d = sub.add_parser("disasm", help="disassemble an image file")
    d.add_argument("image")
    d.add_argument("--out")
    d.set_defaults(func=cmd_disasm)

    r = sub.add_parser("run", help="call a routine from an image under the harness")
    r.add_argument("image")
    r.add_argument("--params", help="NptParams file (default: built-in sample)")
    r.add_argument("--function", choices=FUNCTIONS,
                   help="routine to call (default: the last one present)")
    r.add_argument("--trace", action="store_true", help="print one line per step")
    r.add_argument("--max-steps", type=int, default=1_000_000)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("translate", help="build tables, then translate addresses")
    t.add_argument("addresses", nargs="+", type=_int)
    t.add_argument("--params")
    t.add_argument("--paging-off", action="store_true",
                   help="translate with guest mode off (identity)")
    t.set_defaults(func=cmd_translate)

    v = sub.add_parser("verify", help="run the cutpoint VC suite for a shipped spec")
    v.add_argument("spec")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", default="verify-report.txt")
    v.add_argument("--out", help="directory for witness params files "
                                 "(default: next to the report)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("dump-tables", help="build tables and print every entry")
    g.add_argument("--params")
    g.add_argument("--out")
    g.set_defaults(func=cmd_dump_tables)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "max_steps", 0) < 0:
        print("y86pp: --max-steps must be non-negative", file=sys.stderr)
        return USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"y86pp: {e}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
