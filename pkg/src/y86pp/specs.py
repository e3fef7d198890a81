"""Cutpoint specifications for the four shipped MinVisor routines.

Each routine gets a precondition (the harness state of a well-formed call
with paging off), loop-head assertions written against the stack-frame slots
the assembly uses, and a modify function spelling out the complete exit
state in closed form.  create_nested_pt's modify function is built from the
callees' modify functions rather than re-deriving their effects.
"""

from __future__ import annotations

import random
from typing import Callable, Dict, List, Optional, Tuple

import networkx as nx

from . import isa
from .assembler import ProgramImage
from .cutpoint import CutpointSpec, Trial
from .minvisor import (
    FUNCTIONS, PAGE_2M, PAGE_4K, PDE_FLAGS, SENTINEL, STACK_SIZE, NptParams,
    call_arguments, format_params, function_range, minvisor_image, random_params,
    setup_call,
)
from .state import MASK32, Flags, MachineState, Reg, Status

# stack headroom the deepest call chain needs below the harness ESP
STACK_HEADROOM = 256

LOOP_HEADS = {
    "init_pdpt": ("L13",),
    "init_pdts": ("L7", "L9"),
    "sec_not_present": ("L2",),
    "create_nested_pt": (),
}

STEP_BOUNDS = {  # (between cutpoints, total)
    "init_pdpt": (200, 1_000),
    "init_pdts": (200, 100_000),
    "sec_not_present": (200, 20_000),
    "create_nested_pt": (150_000, 150_000),
}

Check = Callable[[MachineState, MachineState], Optional[str]]


def _s32(x: int) -> int:
    return x - (1 << 32) if x & 0x80000000 else x


def add_flags(a: int, b: int) -> Flags:
    """Flags of a 32-bit add, from wide signed and unsigned sums."""
    r = (a + b) & MASK32
    return Flags(zf=r == 0, sf=r >= 1 << 31,
                 of=not -(1 << 31) <= _s32(a) + _s32(b) < 1 << 31,
                 cf=a + b > MASK32)


def _pde(i: int, j: int) -> int:
    return ((i * 512 + j) * PAGE_2M) | PDE_FLAGS


def _bytes64(values) -> bytes:
    return b"".join((v & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little") for v in values)


# ---------------------------------------------------------------------------
# exit-state builders


class _Frame:
    """Helper for writing a modify function: a working copy of the state."""

    def __init__(self, s: MachineState):
        self.s = s.copy()
        self.entry_esp = s.gpr[Reg.ESP]
        self.ret = s.read32(self.entry_esp)

    def arg(self, k: int) -> int:
        return self.s.read32(self.entry_esp + 4 + 4 * k)

    def put(self, addr: int, value: int) -> None:
        self.s.write32(addr & MASK32, value)

    def reg(self, r: Reg, v: int) -> None:
        self.s.set_reg(r, v)

    def finish(self, saved_ebp: int) -> MachineState:
        self.s.set_reg(Reg.ESP, self.entry_esp + 4)
        self.s.set_reg(Reg.EBP, saved_ebp)
        self.s.eip = self.ret
        return self.s


def modify_init_pdpt(s0: MachineState) -> MachineState:
    f = _Frame(s0)
    E = f.entry_esp
    F = E - 4
    pdptp, arr = f.arg(0), f.arg(1)
    ebp0, ebx0 = s0.gpr[Reg.EBP], s0.gpr[Reg.EBX]
    pdts = [s0.read32(arr + 4 * i) for i in range(4)]
    for i in range(4):
        f.s.write64(pdptp + 8 * i, pdts[i] | 1)
    f.put(F, ebp0)
    f.put(F - 4, ebx0)
    f.put(F - 16, 1)
    f.put(F - 12, 0)
    f.put(F - 20, 4)
    f.reg(Reg.EAX, pdts[3] | 1)
    f.reg(Reg.ECX, pdptp + 24)
    f.reg(Reg.EDX, 0)
    f.reg(Reg.IMME1, 3)
    f.reg(Reg.VALU1, 20)
    f.s.flags = add_flags(20, (E - 28) & MASK32)
    return f.finish(ebp0)


def modify_init_pdts(s0: MachineState) -> MachineState:
    f = _Frame(s0)
    E = f.entry_esp
    F = E - 4
    arr = f.arg(0)
    pdts = [s0.read32(arr + 4 * i) for i in range(4)]
    for i in range(4):
        f.s.write_bytes(pdts[i], _bytes64(_pde(i, j) for j in range(512)))
    f.put(F, s0.gpr[Reg.EBP])
    f.put(F - 4, s0.gpr[Reg.ESI])
    f.put(F - 8, s0.gpr[Reg.EBX])
    f.put(F - 24, PDE_FLAGS)
    f.put(F - 20, 0)
    f.put(F - 16, PAGE_2M)
    f.put(F - 12, 0)
    f.put(F - 48, 0)  # addr = 2048 * 2MiB = 1 << 32
    f.put(F - 44, 1)
    f.put(F - 32, 4)
    f.put(F - 28, 512)
    f.put(F - 36, pdts[3])
    f.reg(Reg.EAX, PAGE_2M)
    f.reg(Reg.ECX, PDE_FLAGS)
    f.reg(Reg.EDX, 0)
    f.reg(Reg.IMME1, 3)
    f.reg(Reg.VALU1, 48)
    f.s.flags = add_flags(48, (E - 60) & MASK32)
    return f.finish(s0.gpr[Reg.EBP])


def _sec_values(s: MachineState, pdptp: int, vs: int, size: int) -> Dict[str, int]:
    j = vs >> 30
    lo = s.read32(pdptp + 8 * j)
    hi = s.read32(pdptp + 8 * j + 4)
    start = (vs & 0x3FE00000) >> 21
    end = (((vs + size) & MASK32) & 0x3FE00000) >> 21
    return dict(j=j, lo=lo, hi=hi, pdt=lo & 0xFFFFF000, start=start, end=end)


def modify_sec_not_present(s0: MachineState) -> MachineState:
    f = _Frame(s0)
    E = f.entry_esp
    F = E - 4
    v = _sec_values(s0, f.arg(0), f.arg(1), f.arg(2))
    for i in range(v["start"], v["end"]):
        f.s.write64(v["pdt"] + 8 * i, 0)
    looped = v["start"] < v["end"]
    for off, val in _sec_locals(v, v["end"] if looped else v["start"]).items():
        f.put(F + off, val)
    f.put(F, s0.gpr[Reg.EBP])
    f.reg(Reg.EAX, v["end"] if looped else v["start"])
    f.reg(Reg.EDX, v["hi"])
    f.reg(Reg.IMME1, 1 if looped else 21)
    f.reg(Reg.VALU1, 64)
    f.s.flags = add_flags(64, (E - 68) & MASK32)
    return f.finish(s0.gpr[Reg.EBP])


def _sec_locals(v: Dict[str, int], i: int) -> Dict[int, int]:
    return {-16: 0xFFFFF000, -12: 0xFFFFFFFF, -20: v["j"], -32: v["lo"],
            -28: v["hi"], -40: v["pdt"], -36: v["hi"], -44: v["pdt"],
            -48: v["pdt"], -52: v["start"], -56: v["end"], -60: i}


def _call_returns(image: ProgramImage) -> Dict[str, int]:
    """Return address after each call in create_nested_pt, keyed by callee."""
    lo, hi = function_range(image, "create_nested_pt")
    names = {image.symbols[n]: n for n in FUNCTIONS}
    out = {}
    addr = lo
    while addr < hi:
        off = addr - image.base
        ins = isa.decode_bytes(lambda k: image.data[off + k], addr)
        if ins.mnemonic == "call":
            out[names[ins.const]] = addr + ins.length
        addr += ins.length
    return out


def make_modify_create(image: ProgramImage) -> Callable[[MachineState], MachineState]:
    rets = _call_returns(image)
    entry = {n: image.symbols[n] for n in FUNCTIONS}

    def modify(s0: MachineState) -> MachineState:
        f = _Frame(s0)
        E = f.entry_esp
        F = E - 4
        pdptp, arr, vs, size = (f.arg(k) for k in range(4))
        ebp0 = s0.gpr[Reg.EBP]
        s = f.s
        s.write32(F, ebp0)
        s.set_reg(Reg.EBP, F)

        def call(callee, args, modify_fn):
            nonlocal s
            sp = F
            for a in reversed(args):
                sp -= 4
                s.write32(sp, a)
            s.set_reg(Reg.EAX, args[0])
            sp -= 4
            s.write32(sp, rets[callee])
            s.set_reg(Reg.ESP, sp)
            s.eip = entry[callee]
            s = modify_fn(s)
            cleanup = 4 * len(args)
            s.set_reg(Reg.IMME1, cleanup)
            s.flags = add_flags(cleanup, s.gpr[Reg.ESP])
            s.set_reg(Reg.ESP, s.gpr[Reg.ESP] + cleanup)

        call("init_pdpt", [pdptp, arr], modify_init_pdpt)
        call("init_pdts", [arr], modify_init_pdts)
        call("sec_not_present", [pdptp, vs, size], modify_sec_not_present)
        s.set_reg(Reg.EAX, pdptp)
        s.set_reg(Reg.ESP, E + 4)
        s.set_reg(Reg.EBP, ebp0)
        s.eip = f.ret
        return s

    return modify


# ---------------------------------------------------------------------------
# preconditions


def make_precondition(fn: str, p: NptParams, image: ProgramImage
                      ) -> Callable[[MachineState], bool]:
    """The harness call precondition, one clause per line below:

    well-formed state, code loaded at its base, poised at ``fn`` with the
    sentinel return address and arguments on the stack, paging off, valid
    disjoint aligned tables and protected region, a stack with room that
    does not wrap, and the PDT pointer array in place.
    """
    args = call_arguments(fn, p)
    sentinel = image.symbols[SENTINEL]
    lo_stack = p.stack_top - STACK_SIZE
    params_ok = p.is_valid()

    def pre(s: MachineState) -> bool:
        if s.status is not Status.RUNNING:
            return False
        if any(not 0 <= v <= MASK32 for v in s.gpr) or any(
                not 0 <= b <= 0xFF for b in s.memory.values()):
            return False
        if s.read_bytes(image.base, len(image.data)) != image.data:
            return False
        esp = s.gpr[Reg.ESP]
        if s.eip != image.symbols[fn] or s.read32(esp) != sentinel:
            return False
        if [s.read32(esp + 4 + 4 * k) for k in range(len(args))] != args:
            return False
        if s.guest_mode:
            return False
        if not params_ok:
            return False
        if not lo_stack + STACK_HEADROOM <= esp <= p.stack_top - 4 * (len(args) + 1):
            return False
        if [s.read32(p.pdt_array_base + 4 * i) for i in range(4)] != list(p.pdt_bases):
            return False
        if fn == "sec_not_present":
            j = p.visor_start >> 30
            e = s.read64(p.pdpt_base + 8 * j)
            if not e & 1 or (e & 0xFFFFF000) != p.pdt_bases[j]:
                return False
        return True

    return pre


# ---------------------------------------------------------------------------
# loop assertions


def _expect(cond: bool, what: str) -> Optional[str]:
    return None if cond else what


def _first(*checks) -> Optional[str]:
    for c in checks:
        r = c()
        if r is not None:
            return r
    return None


def _unchanged(s0: MachineState, s: MachineState, lo: int, hi: int) -> bool:
    return s.read_bytes(lo, hi - lo) == s0.read_bytes(lo, hi - lo)


def _frame_common(s0: MachineState, s: MachineState, esp_offset: int,
                  saved: List[Tuple[int, Reg]]) -> Optional[str]:
    E = s0.gpr[Reg.ESP]
    F = (E - 4) & MASK32
    if s.status is not Status.RUNNING or s.guest_mode or s.cr3 != s0.cr3:
        return "machine mode changed"
    if s.gpr[Reg.EBP] != F:
        return "EBP is not the frame pointer"
    if s.gpr[Reg.ESP] != (E + esp_offset) & MASK32:
        return "ESP is not at the frame bottom"
    if s.read32(F) != s0.gpr[Reg.EBP]:
        return "saved EBP slot corrupted"
    for off, r in saved:
        if s.read32(F + off) != s0.gpr[r]:
            return f"saved {r.name} slot corrupted"
    if s.read_bytes(E, 20) != s0.read_bytes(E, 20):
        return "return address or arguments corrupted"
    if s.gpr[Reg.EDI] != s0.gpr[Reg.EDI]:
        return "EDI changed"
    return None


def make_assertion_init_pdpt(p: NptParams, image: ProgramImage) -> Check:
    entry, head = image.symbols["init_pdpt"], image.symbols["L13"]
    exit_addr = image.symbols[SENTINEL]

    def check(s0, s):
        if s.eip == entry:
            return _expect(s == s0, "entry state differs from initial state")
        if s.eip == exit_addr:
            return None  # exit equality is checked against modify
        if s.eip != head:
            return "not at a cutpoint"
        E = s0.gpr[Reg.ESP]
        F = E - 4
        pdptp, arr = s0.read32(E + 4), s0.read32(E + 8)
        i = s.read32(F - 20)
        pdts = [s0.read32(arr + 4 * k) for k in range(4)]
        return _first(
            lambda: _frame_common(s0, s, -28, [(-4, Reg.EBX)]),
            lambda: _expect(i <= 4, f"loop index {i} out of range"),
            lambda: _expect(s.read32(F - 16) == 1 and s.read32(F - 12) == 0,
                            "page_present local wrong"),
            lambda: _expect(all(s.read64(pdptp + 8 * k) == pdts[k] | 1
                                for k in range(i)), "written PDPT entry wrong"),
            lambda: _expect(_unchanged(s0, s, pdptp + 8 * i, pdptp + 32),
                            "unwritten PDPT entries changed"),
            lambda: _expect(_unchanged(s0, s, arr, arr + 16), "pointer array changed"),
        )

    return check


def make_assertion_init_pdts(p: NptParams, image: ProgramImage) -> Check:
    entry = image.symbols["init_pdts"]
    l7, l9 = image.symbols["L7"], image.symbols["L9"]
    exit_addr = image.symbols[SENTINEL]
    full = [_bytes64(_pde(i, j) for j in range(512)) for i in range(4)]

    def check(s0, s):
        if s.eip == entry:
            return _expect(s == s0, "entry state differs from initial state")
        if s.eip == exit_addr:
            return None
        if s.eip not in (l7, l9):
            return "not at a cutpoint"
        E = s0.gpr[Reg.ESP]
        F = E - 4
        arr = s0.read32(E + 4)
        pdts = [s0.read32(arr + 4 * k) for k in range(4)]
        i = s.read32(F - 32)
        at_l9 = s.eip == l9
        j = s.read32(F - 28) if at_l9 else 0
        addr = s.read32(F - 48) | s.read32(F - 44) << 32

        def tables():
            for k in range(4):
                if k < i:
                    if s.read_bytes(pdts[k], PAGE_4K) != full[k]:
                        return f"table {k} not fully initialized"
                elif k == i and at_l9:
                    if s.read_bytes(pdts[k], 8 * j) != full[k][:8 * j]:
                        return f"table {k} entries below {j} wrong"
                    if not _unchanged(s0, s, pdts[k] + 8 * j, pdts[k] + PAGE_4K):
                        return f"table {k} entries from {j} changed early"
                elif not _unchanged(s0, s, pdts[k], pdts[k] + PAGE_4K):
                    return f"table {k} changed before its turn"
            return None

        return _first(
            lambda: _frame_common(s0, s, -60, [(-4, Reg.ESI), (-8, Reg.EBX)]),
            lambda: _expect(i < 4 if at_l9 else i <= 4, f"table index {i} out of range"),
            lambda: _expect(j <= 512, f"entry index {j} out of range"),
            lambda: _expect(s.read32(F - 24) == PDE_FLAGS and s.read32(F - 20) == 0,
                            "flags local wrong"),
            lambda: _expect(s.read32(F - 16) == PAGE_2M and s.read32(F - 12) == 0,
                            "page size local wrong"),
            lambda: _expect(addr == (i * 512 + j) * PAGE_2M, "address accumulator wrong"),
            lambda: _expect(not at_l9 or s.read32(F - 36) == pdts[i],
                            "current table pointer wrong"),
            lambda: _expect(_unchanged(s0, s, arr, arr + 16), "pointer array changed"),
            tables,
        )

    return check


def make_assertion_sec_not_present(p: NptParams, image: ProgramImage) -> Check:
    entry, head = image.symbols["sec_not_present"], image.symbols["L2"]
    exit_addr = image.symbols[SENTINEL]

    def check(s0, s):
        if s.eip == entry:
            return _expect(s == s0, "entry state differs from initial state")
        if s.eip == exit_addr:
            return None
        if s.eip != head:
            return "not at a cutpoint"
        E = s0.gpr[Reg.ESP]
        F = E - 4
        v = _sec_values(s0, s0.read32(E + 4), s0.read32(E + 8), s0.read32(E + 12))
        i = s.read32(F - 60)
        top = max(v["start"], v["end"])
        pdt = v["pdt"]

        def locals_ok():
            for off, val in _sec_locals(v, i).items():
                if s.read32(F + off) != val & MASK32:
                    return f"local at EBP{off} wrong"
            return None

        def entries():
            for k in range(v["start"], i):
                if s.read64(pdt + 8 * k) != 0:
                    return f"entry {k} not cleared"
            lo = pdt + 8 * i
            if not _unchanged(s0, s, pdt, pdt + 8 * v["start"]) or \
                    not _unchanged(s0, s, lo, max(lo, pdt + PAGE_4K)):
                return "entries outside the cleared range changed"
            return None

        return _first(
            lambda: _frame_common(s0, s, -68, []),
            lambda: _expect(v["start"] <= i <= top, f"loop index {i} out of range"),
            locals_ok,
            entries,
        )

    return check


def make_assertion_create(p: NptParams, image: ProgramImage) -> Check:
    entry = image.symbols["create_nested_pt"]
    exit_addr = image.symbols[SENTINEL]

    def check(s0, s):
        if s.eip == entry:
            return _expect(s == s0, "entry state differs from initial state")
        if s.eip == exit_addr:
            return None
        return "not at a cutpoint"

    return check


_ASSERTIONS = {
    "init_pdpt": make_assertion_init_pdpt,
    "init_pdts": make_assertion_init_pdts,
    "sec_not_present": make_assertion_sec_not_present,
    "create_nested_pt": make_assertion_create,
}


def make_modify(fn: str, image: ProgramImage) -> Callable[[MachineState], MachineState]:
    if fn == "init_pdpt":
        return modify_init_pdpt
    if fn == "init_pdts":
        return modify_init_pdts
    if fn == "sec_not_present":
        return modify_sec_not_present
    if fn == "create_nested_pt":
        return make_modify_create(image)
    raise KeyError(fn)


# ---------------------------------------------------------------------------
# spec assembly


def write_spans(fn: str, p: NptParams, image: ProgramImage
                ) -> Callable[[MachineState, int], List[Tuple[int, int]]]:
    """Tables, pointer array, code and the used stack window."""
    def frame(s0: MachineState, low_water: int) -> List[Tuple[int, int]]:
        spans = [(lo, hi) for name, lo, hi in p.regions() if name != "stack"]
        spans.append((image.base, image.end))
        spans.append((low_water, p.stack_top))
        return spans

    return frame


def build_spec(fn: str, p: NptParams, image: Optional[ProgramImage] = None,
               modify: Optional[Callable[[MachineState], MachineState]] = None
               ) -> CutpointSpec:
    if fn not in FUNCTIONS:
        raise KeyError(f"no shipped spec for {fn!r}")
    if image is None:
        image = minvisor_image(p.code_base)
    if fn == "create_nested_pt":
        lo, hi = image.symbols[FUNCTIONS[0]], image.end
    else:
        lo, hi = function_range(image, fn)
    entry = image.symbols[fn]
    exit_addr = image.symbols[SENTINEL]
    names = {entry: fn, exit_addr: "exit"}
    names.update({image.symbols[l]: l for l in LOOP_HEADS[fn]})
    cut_addrs = frozenset(names)
    check = _ASSERTIONS[fn](p, image)
    step_bound, total_bound = STEP_BOUNDS[fn]
    return CutpointSpec(
        name=fn,
        precondition=make_precondition(fn, p, image),
        in_main=lambda s: lo <= s.eip < hi,
        cutpoint=lambda s: s.eip in cut_addrs,
        assertion=lambda s0, s: check(s0, s) is None,
        modify=modify or make_modify(fn, image),
        exit=lambda s: s.eip == exit_addr,
        step_bound=step_bound,
        total_bound=total_bound,
        frame=write_spans(fn, p, image),
        cutpoint_names=names,
        explain=lambda s0, s: check(s0, s) or "assertion holds",
    )


def control_flow_graph(image: ProgramImage, fn: str) -> nx.DiGraph:
    """Instruction-level CFG of one routine (calls fall through)."""
    lo, hi = function_range(image, fn)
    g = nx.DiGraph()
    addr = lo
    while addr < hi:
        off = addr - image.base
        ins = isa.decode_bytes(lambda k: image.data[off + k], addr)
        nxt = addr + ins.length
        g.add_node(addr)
        if ins.mnemonic in isa.JUMPS:
            g.add_edge(addr, ins.const)
            if ins.mnemonic != "jmp":
                g.add_edge(addr, nxt)
        elif ins.mnemonic not in ("ret", "halt"):
            g.add_edge(addr, nxt)
        addr = nxt
    return g


def cutpoints_cut_all_cycles(image: ProgramImage, fn: str) -> bool:
    """True when every CFG cycle of ``fn`` passes through a loop-head cutpoint."""
    g = control_flow_graph(image, fn)
    g.remove_nodes_from(image.symbols[l] for l in LOOP_HEADS[fn])
    return nx.is_directed_acyclic_graph(g)


# ---------------------------------------------------------------------------
# trial factories


def random_background(p: NptParams, rng: random.Random, n: int = 512) -> Dict[int, int]:
    """Random bytes scattered over memory, densest around the structures."""
    bg = {}
    anchors = [lo for _, lo, _hi in p.regions()]
    for _ in range(n):
        if rng.random() < 0.5:
            a = rng.getrandbits(32)
        else:
            a = (rng.choice(anchors) + rng.randint(-64, PAGE_4K + 64)) & MASK32
        bg[a] = rng.randrange(1, 256)
    return bg


def random_registers(rng: random.Random) -> Dict[Reg, int]:
    return {r: rng.getrandbits(32) for r in Reg if r not in (Reg.ESP, Reg.EBP)}


def corrupt_one_byte(image: ProgramImage, fn: str, rng: random.Random) -> ProgramImage:
    lo, hi = function_range(image, fn)
    data = bytearray(image.data)
    k = rng.randrange(lo, hi) - image.base
    data[k] ^= rng.randrange(1, 256)
    return ProgramImage(image.base, bytes(data), dict(image.symbols))


def corrupt_modify(modify: Callable[[MachineState], MachineState], p: NptParams,
                   rng: random.Random) -> Callable[[MachineState], MachineState]:
    """Modify function with one table byte flipped."""
    base = rng.choice(p.pdt_bases)
    addr = base + rng.randrange(PAGE_4K)

    def wrong(s0: MachineState) -> MachineState:
        s = modify(s0)
        s.write_byte(addr, s.read_byte(addr) ^ 0x01)
        return s

    return wrong


def trial_factory(fn: str, mutation: Optional[str] = None,
                  param_generator: Callable[[random.Random], NptParams] = random_params):
    """Factory for verify(): random params, registers and background memory.

    ``mutation`` is None, "binary" (one byte of ``fn`` flipped) or "modify"
    (one expected table byte flipped).
    """
    if fn not in FUNCTIONS:
        raise KeyError(f"no shipped spec for {fn!r}")
    if mutation not in (None, "binary", "modify"):
        raise ValueError(f"unknown mutation {mutation!r}")

    def factory(rng: random.Random, t: int) -> Trial:
        p = param_generator(rng)
        image = minvisor_image(p.code_base)
        if mutation == "binary":
            image = corrupt_one_byte(image, fn, rng)
        s0 = setup_call(fn, p, image=image, background=random_background(p, rng),
                        regs=random_registers(rng))
        spec = build_spec(fn, p, image)
        if mutation == "binary":
            # the precondition must accept the corrupted code it is handed
            spec.precondition = make_precondition(fn, p, image)
        if mutation == "modify":
            spec.modify = corrupt_modify(spec.modify, p, rng)
        return Trial(spec, s0, {"params": format_params(p), "function": fn,
                                "mutation": mutation or "none"})

    return factory
