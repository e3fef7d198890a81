"""Acceptance criteria 1-8, each at its stated tolerance and time budget.

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly: ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import random
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Tuple

sys.path.insert(0, str(Path(__file__).resolve().parent))

from malformed_sources import MALFORMED  # noqa: E402
from y86pp import isa  # noqa: E402
from y86pp.assembler import AsmError, assemble_text, disassemble  # noqa: E402
from y86pp.cutpoint import VcKind, Verdict, verify  # noqa: E402
from y86pp.isa import alu_exec, signed32  # noqa: E402
from y86pp.minvisor import (FUNCTIONS, SAMPLE_PARAMS, STACK_SIZE, NptParams,  # noqa: E402
                            enable_nested_paging, oracle_delta, program_source,
                            random_params, run_call, setup_call, stratified_addresses)
from y86pp.paging import PageFault, Physical, va_to_pa  # noqa: E402
from y86pp.specs import random_background, trial_factory  # noqa: E402
from y86pp.state import MASK32, Flags, MachineState  # noqa: E402

SEED = 20260
RESULTS: Dict[int, Tuple[bool, str]] = {}


def _record(n: int, title: str, body: Callable[[], str]) -> None:
    t0 = time.perf_counter()
    try:
        note = body()
    except AssertionError as e:
        RESULTS[n] = (False, f"{title}: {e} ({time.perf_counter() - t0:.2f}s)")
        raise
    RESULTS[n] = (True, f"{title}: {note} ({time.perf_counter() - t0:.2f}s)")


def summary_lines() -> List[str]:
    return [f"criterion {n}: {'PASS' if ok else 'FAIL'} {text}"
            for n, (ok, text) in sorted(RESULTS.items())]


def built_tables(p: NptParams) -> MachineState:
    """Guest-mode state after running the create_nested_pt binary."""
    s0 = setup_call("create_nested_pt", p)
    s1, _ = isa.run(s0, 1_000_000)
    assert s1.gpr[0] == p.pdpt_base and s1.status.value == "Halted", s1.fault
    return enable_nested_paging(s1, p.pdpt_base)


def _protection_params() -> List[NptParams]:
    rng = random.Random(SEED)
    return [random_params(rng) for _ in range(10)]


# -- criteria -----------------------------------------------------------------

def criterion_1() -> str:
    rng = random.Random(SEED + 1)
    checked = 0
    for p in _protection_params():
        s = built_tables(p)
        _, outside = stratified_addresses(p, rng, 0, 1000)
        for a in outside:
            got = va_to_pa(a, s)
            assert got == Physical(a), f"{p}: 0x{a:08x} -> {got}"
        checked += len(outside)
    return f"{checked} exterior addresses map to themselves"


def criterion_2() -> str:
    rng = random.Random(SEED + 2)
    checked = 0
    for p in _protection_params():
        s = built_tables(p)
        inside, _ = stratified_addresses(p, rng, 1000, 0)
        assert {p.visor_start, p.visor_end - 1} <= set(inside)
        for a in inside:
            got = va_to_pa(a, s)
            assert got == PageFault(a, 2), f"{p}: 0x{a:08x} -> {got}"
        for a in (p.visor_start - 1, p.visor_end):
            assert va_to_pa(a, s) == Physical(a), f"boundary 0x{a:08x}"
        checked += len(inside)
    return f"{checked} interior addresses fault at level 2; edges -1/+1 map"


def criterion_3() -> str:
    rng = random.Random(SEED + 3)
    probes = 0
    table_bytes = 0
    for _ in range(20):
        p = random_params(rng)
        for fn in FUNCTIONS:
            s0, s1, _ = run_call(fn, p, background=random_background(p, rng))
            assert s1.status.value == "Halted", (fn, s1.fault)
            expected = oracle_delta(fn, p, s0.memory)
            for lo, hi in p.table_regions():
                for a in range(lo, hi):
                    want = expected.get(a, s0.read_byte(a))
                    assert s1.read_byte(a) == want, f"{fn} {p}: byte 0x{a:08x}"
                    table_bytes += 1
            stack = (p.stack_top - STACK_SIZE, p.stack_top)
            in_tables = lambda a: any(lo <= a < hi for lo, hi in p.table_regions())
            sample = [a for a in s0.memory.keys() | s1.memory.keys() if not in_tables(a)]
            sample += [rng.getrandbits(32) for _ in range(64)]
            for a in sample:
                if in_tables(a) or stack[0] <= a < stack[1]:
                    continue
                assert s1.read_byte(a) == s0.read_byte(a), f"{fn} {p}: frame 0x{a:08x}"
                probes += 1
    assert probes >= 10_000, f"only {probes} frame probes"
    return f"{table_bytes} table bytes equal the oracles; {probes} frame probes unchanged"


def criterion_4() -> str:
    p = SAMPLE_PARAMS
    s = built_tables(p)
    protected = set(range(p.visor_start >> 21, p.visor_end >> 21))
    zeroed = 0
    for i in range(4):
        assert s.read64(p.pdpt_base + 8 * i) == p.pdt_bases[i] | 1, f"PDPT[{i}]"
        for j in range(512):
            got = s.read64(p.pdt_bases[i] + 8 * j)
            n = i * 512 + j
            want = 0 if n in protected else (n << 21) | 0xE7
            assert got == want, f"PDT{i}[{j}] = 0x{got:016x}, want 0x{want:016x}"
            zeroed += n in protected
    assert zeroed == len(protected)
    return f"2048 PDT entries ({zeroed} zeroed) and 4 PDPT entries exact"


def criterion_5() -> str:
    clean = verify(trial_factory("init_pdts"), 20, SEED, "init_pdts")
    assert clean.all_passed, "\n".join(clean.lines())
    for kind in (VcKind.ENTRY, VcKind.EXIT):
        assert clean.count(Verdict.PASS, kind) == 20, kind
    heads = {r.cutpoint.split("->")[0] for _, r in clean.reports
             if r.kind is VcKind.PRESERVATION}
    assert {"L7", "L9"} <= heads, heads
    controls = {}
    for mutation in ("binary", "modify"):
        s = verify(trial_factory("init_pdts", mutation), 20, SEED, "init_pdts")
        controls[mutation] = len(s.failures)
        assert s.failures, f"{mutation} mutation went undetected"
    n_pres = clean.count(Verdict.PASS, VcKind.PRESERVATION)
    return (f"20 clean trials pass ({n_pres} preservation VCs at {sorted(heads)}); "
            f"control failures binary={controls['binary']} modify={controls['modify']}")


def _wide(op: str, a: int, b: int, cf_in: bool) -> Tuple[int, Flags]:
    c = int(op == "adcl" and cf_in)
    if op in ("addl", "adcl"):
        u, sg = b + a + c, signed32(b) + signed32(a) + c
    else:
        u, sg = b - a, signed32(b) - signed32(a)
    r = u % 2**32
    return r, Flags(zf=r == 0, sf=r >= 2**31, of=not -2**31 <= sg < 2**31,
                    cf=not 0 <= u < 2**32)


def criterion_6() -> str:
    rng = random.Random(SEED + 6)
    for op in ("addl", "subl", "adcl", "cmpl"):
        for _ in range(100_000):
            a, b, c = rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(1) == 1
            got = alu_exec(op, a, b, cf_in=c)
            assert got == _wide(op, a, b, c), f"{op} a=0x{a:x} b=0x{b:x} cf={c}: {got}"
    for _ in range(100_000):
        x, y = rng.getrandbits(64), rng.getrandbits(64)
        lo, f = alu_exec("addl", x & MASK32, y & MASK32)
        hi, _ = alu_exec("adcl", x >> 32, y >> 32, cf_in=f.cf)
        assert hi << 32 | lo == (x + y) % 2**64, f"0x{x:x} + 0x{y:x}"
    return "4x10^5 flag checks and 10^5 64-bit additions agree"


def criterion_7() -> str:
    img = assemble_text(program_source("init_pdts"), SAMPLE_PARAMS.code_base)
    again = assemble_text(disassemble(img), SAMPLE_PARAMS.code_base)
    assert again.data == img.data, "re-assembled image differs"
    assert len(MALFORMED) >= 10
    for name, text, line in MALFORMED:
        try:
            assemble_text(text, 0)
        except AsmError as e:
            assert e.line == line and f"line {line}," in str(e), f"{name}: {e}"
        else:
            raise AssertionError(f"{name}: accepted")
    return f"{len(img.data)}-byte image round-trips; {len(MALFORMED)} errors carry lines"


def naive_walk(addr: int, s: MachineState):
    if not s.guest_mode:
        return Physical(addr)
    base = s.cr3 - s.cr3 % 4096
    i, rest = divmod(addr, 2**30)
    j, off = divmod(rest, 2**21)
    e1 = sum(s.read_byte(base + 8 * i + k) * 256**k for k in range(8))
    if e1 % 2 == 0:
        return PageFault(addr, 1)
    e2_at = e1 % 2**32 - e1 % 4096 + 8 * j
    e2 = sum(s.read_byte(e2_at + k) * 256**k for k in range(8))
    if e2 % 2 == 0:
        return PageFault(addr, 2)
    return Physical(e2 % 2**32 - e2 % 2**21 + off)


def criterion_8() -> str:
    rng = random.Random(SEED + 8)
    s = MachineState(guest_mode=True, cr3=0x00A00000 | rng.getrandbits(12))
    for i in range(4):
        s.write64(0x00A00000 + 8 * i, (rng.getrandbits(64) & ~0xFFF & ~(0xFFFFF << 12))
                  | ((0x00B00000 + 0x1000 * i)) | (rng.random() < 0.8))
        for j in range(512):
            s.write64(0x00B00000 + 0x1000 * i + 8 * j, rng.getrandbits(64))
    faults = 0
    for _ in range(1 << 12):
        a = rng.getrandbits(32)
        got = va_to_pa(a, s)
        assert got == naive_walk(a, s), f"0x{a:08x}: {got} != {naive_walk(a, s)}"
        faults += isinstance(got, PageFault)
    return f"4096 addresses agree ({faults} faults)"


# -- pytest entry points ------------------------------------------------------

def test_criterion_1_exterior_identity():
    def body():
        t0 = time.perf_counter()
        note = criterion_1()
        dt = time.perf_counter() - t0
        assert dt < 10, f"took {dt:.1f}s (budget 10s)"
        return note
    _record(1, "protection: exterior addresses identity-mapped", body)


def test_criterion_2_interior_faults():
    _record(2, "protection: interior addresses fault at level 2", criterion_2)


def test_criterion_3_differential():
    _record(3, "differential equivalence with native oracles", criterion_3)


def test_criterion_4_table_contents():
    def body():
        t0 = time.perf_counter()
        note = criterion_4()
        dt = time.perf_counter() - t0
        assert dt < 1, f"took {dt:.2f}s (budget 1s)"
        return note
    _record(4, "page-table contents", body)


def test_criterion_5_cutpoint_suite():
    def body():
        t0 = time.perf_counter()
        note = criterion_5()
        dt = time.perf_counter() - t0
        assert dt < 60, f"took {dt:.1f}s (budget 60s)"
        return note
    _record(5, "cutpoint VC suite on init_pdts", body)


def test_criterion_6_instruction_oracles():
    def body():
        t0 = time.perf_counter()
        note = criterion_6()
        dt = time.perf_counter() - t0
        assert dt < 5, f"took {dt:.1f}s (budget 5s)"
        return note
    _record(6, "instruction flag oracles", body)


def test_criterion_7_assembler():
    _record(7, "assembler round trip and diagnostics", criterion_7)


def test_criterion_8_translation_equivalence():
    _record(8, "va-to-pa versus naive walk", criterion_8)


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    for t in tests:
        try:
            t()
        except AssertionError:
            pass
    print("\n".join(summary_lines()))
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) and len(RESULTS) == 8 else 1)
