"""Y86++ instruction set: encoding, decoding, ALU semantics and execution.

First byte of every instruction is icode<<4 | ifun.  Register nibbles follow
standard Y86 order (EAX=0 .. EDI=7) plus IMME1=8, VALU1=9; 0xF means none.
Immediates, displacements and jump targets are 4-byte little-endian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

from . import paging
from .state import (
    MASK32, NUM_REGS, REG_NONE, FaultInfo, FaultKind, Flags, MachineState,
    Reg, Status,
)

OPCODES = {
    "halt": 0x00,
    "nop": 0x10,
    "rrmovl": 0x20,
    "irmovl": 0x30,
    "rmmovl": 0x40,
    "mrmovl": 0x50,
    "addl": 0x60,
    "subl": 0x61,
    "andl": 0x62,
    "xorl": 0x63,
    "orl": 0x64,
    "adcl": 0x65,
    "cmpl": 0x66,
    "sall": 0x67,
    "shrl": 0x68,
    "jmp": 0x70,
    "jle": 0x71,
    "jl": 0x72,
    "je": 0x73,
    "jne": 0x74,
    "jge": 0x75,
    "jg": 0x76,
    "jb": 0x77,
    "jbe": 0x78,
    "call": 0x80,
    "ret": 0x90,
    "pushl": 0xA0,
    "popl": 0xB0,
}
MNEMONICS = {op: name for name, op in OPCODES.items()}

ALU_OPS = ("addl", "subl", "andl", "xorl", "orl", "adcl", "cmpl", "sall", "shrl")
JUMPS = ("jmp", "jle", "jl", "je", "jne", "jge", "jg", "jb", "jbe")

# operand shape per mnemonic: which of (ra, rb, const) are present
#   "" none, "ab" two registers, "Vb" imm+dst, "aDb" src+mem, "Dba" mem+dst,
#   "T" target, "a" single register
SHAPES = {"halt": "", "nop": "", "ret": "",
          "rrmovl": "ab", "irmovl": "Vb", "rmmovl": "aDb", "mrmovl": "Dba",
          "call": "T", "pushl": "a", "popl": "a"}
SHAPES.update({op: "ab" for op in ALU_OPS})
SHAPES.update({j: "T" for j in JUMPS})

LENGTHS = {"": 1, "ab": 2, "a": 2, "Vb": 6, "aDb": 6, "Dba": 6, "T": 5}


def instruction_length(mnemonic: str) -> int:
    return LENGTHS[SHAPES[mnemonic]]


class DecodeError(ValueError):
    def __init__(self, message: str, address: int):
        super().__init__(f"{message} at 0x{address:08x}")
        self.address = address


@dataclass(frozen=True)
class Instruction:
    """A decoded instruction.

    ``ra``/``rb`` follow the encoding's register-byte slots.  ``const`` holds
    the immediate (irmovl), displacement (rmmovl/mrmovl) or absolute target
    (jumps, call).
    """

    mnemonic: str
    ra: Optional[int] = None
    rb: Optional[int] = None
    const: Optional[int] = None

    def __post_init__(self):
        shape = SHAPES.get(self.mnemonic)
        if shape is None:
            raise ValueError(f"unknown mnemonic {self.mnemonic!r}")
        want_a = "a" in shape
        want_b = "b" in shape
        want_c = any(c in shape for c in "VDT")
        if (self.ra is not None) != want_a or (self.rb is not None) != want_b \
                or (self.const is not None) != want_c:
            raise ValueError(f"operand shape mismatch for {self.mnemonic}")
        for r in (self.ra, self.rb):
            if r is not None and not 0 <= r < NUM_REGS:
                raise ValueError(f"bad register id {r}")
        if self.const is not None and not 0 <= self.const <= MASK32:
            raise ValueError("constant out of 32-bit range")

    @property
    def length(self) -> int:
        return instruction_length(self.mnemonic)

    def __str__(self):
        def r(x):
            return ":" + Reg(x).name.lower()

        shape = SHAPES[self.mnemonic]
        m = self.mnemonic
        if shape == "":
            return f"({m})"
        if shape == "ab":
            return f"({m} {r(self.ra)} {r(self.rb)})"
        if shape == "a":
            return f"({m} {r(self.ra)})"
        if shape == "Vb":
            return f"({m} {self.const} {r(self.rb)})"
        if shape == "aDb":
            return f"({m} {r(self.ra)} {signed32(self.const)} ({r(self.rb)}))"
        if shape == "Dba":
            return f"({m} {signed32(self.const)} ({r(self.rb)}) {r(self.ra)})"
        return f"({m} {self.const})"


def signed32(x: int) -> int:
    x &= MASK32
    return x - (1 << 32) if x & 0x80000000 else x


def encode(ins: Instruction) -> bytes:
    shape = SHAPES[ins.mnemonic]
    out = bytearray([OPCODES[ins.mnemonic]])
    if shape in ("ab", "aDb", "Dba"):
        out.append(ins.ra << 4 | ins.rb)
    elif shape == "a":
        out.append(ins.ra << 4 | REG_NONE)
    elif shape == "Vb":
        out.append(REG_NONE << 4 | ins.rb)
    if ins.const is not None:
        out += ins.const.to_bytes(4, "little")
    return bytes(out)


def decode_bytes(fetch: Callable[[int], int], addr: int) -> Instruction:
    """Decode one instruction; ``fetch(k)`` returns the byte at offset k."""
    op = fetch(0)
    m = MNEMONICS.get(op)
    if m is None:
        raise DecodeError(f"unknown opcode 0x{op:02x}", addr)
    shape = SHAPES[m]
    if shape == "":
        return Instruction(m)
    if shape == "T":
        return Instruction(m, const=_le32(fetch, 1))
    rb_byte = fetch(1)
    hi, lo = rb_byte >> 4, rb_byte & 0xF

    def reg(n):
        if n >= NUM_REGS:
            raise DecodeError(f"invalid register nibble 0x{n:x}", addr)
        return n

    def none(n):
        if n != REG_NONE:
            raise DecodeError(f"expected empty register nibble, got 0x{n:x}", addr)

    if shape == "ab":
        return Instruction(m, ra=reg(hi), rb=reg(lo))
    if shape == "a":
        none(lo)
        return Instruction(m, ra=reg(hi))
    if shape == "Vb":
        none(hi)
        return Instruction(m, rb=reg(lo), const=_le32(fetch, 2))
    return Instruction(m, ra=reg(hi), rb=reg(lo), const=_le32(fetch, 2))


def _le32(fetch, k):
    return fetch(k) | fetch(k + 1) << 8 | fetch(k + 2) << 16 | fetch(k + 3) << 24


def decode(state: MachineState) -> Instruction:
    """Decode the instruction at eip without mutating the state.

    Raises DecodeError for bad encodings and FetchFault when an
    instruction byte does not translate.
    """
    eip = state.eip

    def fetch(k):
        r = paging.va_to_pa((eip + k) & MASK32, state)
        if isinstance(r, paging.PageFault):
            raise FetchFault(r)
        return state.memory.get(r.addr, 0)

    return decode_bytes(fetch, eip)


class FetchFault(Exception):
    def __init__(self, fault: paging.PageFault):
        super().__init__(f"page fault fetching at 0x{fault.virtual_addr:08x}")
        self.fault = fault


# ---------------------------------------------------------------------------
# ALU

def alu_exec(op: str, a: int, b: int, cf_in: bool = False,
             prev: Optional[Flags] = None) -> Tuple[int, Flags]:
    """Compute ``b op a`` and the resulting flags.

    ``prev`` supplies the flags kept by a zero-count shift.
    """
    a &= MASK32
    b &= MASK32
    of = cf = False
    if op in ("addl", "adcl"):
        carry = 1 if (op == "adcl" and cf_in) else 0
        wide = b + a + carry
        r = wide & MASK32
        cf = wide > MASK32
        of = bool(~(a ^ b) & (a ^ r) & 0x80000000)
    elif op in ("subl", "cmpl"):
        r = (b - a) & MASK32
        cf = b < a
        of = bool((a ^ b) & (b ^ r) & 0x80000000)
    elif op == "andl":
        r = b & a
    elif op == "xorl":
        r = b ^ a
    elif op == "orl":
        r = b | a
    elif op in ("sall", "shrl"):
        n = a & 31
        if n == 0:
            f = prev.copy() if prev is not None else Flags()
            return b, f
        if op == "sall":
            r = (b << n) & MASK32
            cf = bool((b >> (32 - n)) & 1)
        else:
            r = b >> n
            cf = bool((b >> (n - 1)) & 1)
    else:
        raise ValueError(f"not an ALU op: {op}")
    return r, Flags(zf=r == 0, sf=bool(r & 0x80000000), of=of, cf=cf)


def condition_holds(mnemonic: str, f: Flags) -> bool:
    lt = f.sf != f.of
    if mnemonic == "jmp":
        return True
    if mnemonic == "jle":
        return lt or f.zf
    if mnemonic == "jl":
        return lt
    if mnemonic == "je":
        return f.zf
    if mnemonic == "jne":
        return not f.zf
    if mnemonic == "jge":
        return not lt
    if mnemonic == "jg":
        return not lt and not f.zf
    if mnemonic == "jb":
        return f.cf
    if mnemonic == "jbe":
        return f.cf or f.zf
    raise ValueError(f"not a jump: {mnemonic}")


# ---------------------------------------------------------------------------
# execution


class _Fault(Exception):
    def __init__(self, info: FaultInfo):
        self.info = info


def _translate(state: MachineState, eip: int, base: int, n: int) -> List[int]:
    r = paging.translate_mem_access(state, base, n)
    if isinstance(r, paging.PageFault):
        raise _Fault(FaultInfo(FaultKind.PAGE_FAULT, eip,
                               address=r.virtual_addr, level=r.level))
    return r


def _load32(state, eip, vaddr):
    mem = state.memory
    if not state.guest_mode:
        return (mem.get(vaddr, 0) | mem.get((vaddr + 1) & MASK32, 0) << 8
                | mem.get((vaddr + 2) & MASK32, 0) << 16
                | mem.get((vaddr + 3) & MASK32, 0) << 24)
    p = _translate(state, eip, vaddr, 4)
    return mem.get(p[0], 0) | mem.get(p[1], 0) << 8 | mem.get(p[2], 0) << 16 \
        | mem.get(p[3], 0) << 24


def _store_addrs(state, eip, vaddr):
    if not state.guest_mode:
        return [vaddr, (vaddr + 1) & MASK32, (vaddr + 2) & MASK32, (vaddr + 3) & MASK32]
    return _translate(state, eip, vaddr, 4)


def _store32(state, addrs, value, writes):
    mem = state.memory
    watched = state._icache_bytes
    for k, p in enumerate(addrs):
        b = (value >> (8 * k)) & 0xFF
        if p in watched:
            state._icache.clear()
            watched.clear()
        mem[p] = b
        if writes is not None:
            writes.append((p, b))


def _as_tuple(ins: Instruction) -> tuple:
    return (ins.mnemonic, ins.ra, ins.rb, ins.const, ins.length)


def _fetch(state: MachineState) -> tuple:
    """Decoded (mnemonic, ra, rb, const, length) at eip.

    Decodes are cached per physical address while paging is off; a write
    to any cached instruction byte drops the cache.
    """
    eip = state.eip
    if not state.guest_mode:
        hit = state._icache.get(eip)
        if hit is not None:
            return hit
        mem = state.memory
        ins = decode_bytes(lambda k: mem.get((eip + k) & MASK32, 0), eip)
        t = state._icache[eip] = _as_tuple(ins)
        state._icache_bytes.update((eip + k) & MASK32 for k in range(ins.length))
        return t
    try:
        return _as_tuple(decode(state))
    except FetchFault as e:
        raise _Fault(FaultInfo(FaultKind.PAGE_FAULT, eip,
                               address=e.fault.virtual_addr, level=e.fault.level))


def execute_in_place(state: MachineState, writes: Optional[list] = None) -> None:
    """Advance ``state`` by one instruction, mutating it.

    A faulting step changes nothing but status and fault info.  When
    ``writes`` is a list, each physical byte written is appended to it.
    """
    if state.status is not Status.RUNNING:
        return
    eip = state.eip
    try:
        ins = _fetch(state)
        _execute(state, ins, eip, writes)
    except DecodeError as e:
        state.status = Status.FAULTED
        state.fault = FaultInfo(FaultKind.DECODE_ERROR, eip, detail=str(e))
    except _Fault as f:
        state.status = Status.FAULTED
        state.fault = f.info


_ALU = frozenset(ALU_OPS)
_JUMP = frozenset(JUMPS)
ESP = int(Reg.ESP)


def _execute(state: MachineState, ins: tuple, eip: int, writes) -> None:
    m, ra, rb, const, length = ins
    g = state.gpr
    nxt = (eip + length) & MASK32
    if m in _ALU:
        r, f = alu_exec(m, g[ra], g[rb], state.flags.cf, state.flags)
        if m != "cmpl":
            g[rb] = r
        state.flags = f
    elif m in _JUMP:
        if m == "jmp" or condition_holds(m, state.flags):
            nxt = const
    elif m == "mrmovl":
        g[ra] = _load32(state, eip, (g[rb] + const) & MASK32)
    elif m == "irmovl":
        g[rb] = const
    elif m == "rmmovl":
        addrs = _store_addrs(state, eip, (g[rb] + const) & MASK32)
        _store32(state, addrs, g[ra], writes)
    elif m == "rrmovl":
        g[rb] = g[ra]
    elif m == "pushl":
        value = g[ra]
        sp = (g[ESP] - 4) & MASK32
        addrs = _store_addrs(state, eip, sp)
        _store32(state, addrs, value, writes)
        g[ESP] = sp
    elif m == "popl":
        sp = g[ESP]
        value = _load32(state, eip, sp)
        g[ESP] = (sp + 4) & MASK32
        g[ra] = value
    elif m == "call":
        sp = (g[ESP] - 4) & MASK32
        addrs = _store_addrs(state, eip, sp)
        _store32(state, addrs, nxt, writes)
        g[ESP] = sp
        nxt = const
    elif m == "ret":
        sp = g[ESP]
        nxt = _load32(state, eip, sp)
        g[ESP] = (sp + 4) & MASK32
    elif m == "halt":
        state.status = Status.HALTED
        return
    # nop: nothing to do
    state.eip = nxt


def step(state: MachineState) -> MachineState:
    """Pure single step: returns a new state, leaves ``state`` untouched."""
    if state.status is not Status.RUNNING:
        return state
    s = state.copy()
    execute_in_place(s)
    return s


def run(state: MachineState, max_steps: int,
        observe: Optional[Callable[[MachineState], None]] = None
        ) -> Tuple[MachineState, int]:
    """Step until the machine stops or ``max_steps`` are taken.

    ``observe`` is called with the (live) state after every step.
    """
    if max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    if state.status is not Status.RUNNING:
        return state, 0
    s = state.copy()
    n = 0
    while n < max_steps and s.status is Status.RUNNING:
        execute_in_place(s)
        n += 1
        if observe is not None:
            observe(s)
    return s, n


def run_traced(state: MachineState, max_steps: int, emit: Callable[[str], None]
               ) -> Tuple[MachineState, int]:
    """Like run(), emitting one trace line per step."""
    if state.status is not Status.RUNNING:
        return state, 0
    s = state.copy()
    n = 0
    while n < max_steps and s.status is Status.RUNNING:
        eip = s.eip
        before_regs = list(s.gpr)
        before_flags = s.flags.copy()
        try:
            name = decode(s).mnemonic
        except (DecodeError, FetchFault):
            name = "?"
        writes: list = []
        execute_in_place(s, writes)
        emit(format_trace_line(n, eip, name, before_regs, before_flags, s, writes))
        n += 1
    return s, n


def format_trace_line(index: int, eip: int, mnemonic: str, before_regs: List[int],
                      before_flags: Flags, after: MachineState, writes: list) -> str:
    parts = [f"{index:x}", f"{eip:08x}", mnemonic]
    for r in Reg:
        if before_regs[r] != after.gpr[r]:
            parts.append(f"{r.name}={after.gpr[r]:x}")
    for name in ("zf", "sf", "of", "cf"):
        if getattr(before_flags, name) != getattr(after.flags, name):
            parts.append(f"{name.upper()}={int(getattr(after.flags, name))}")
    for addr, b in writes:
        parts.append(f"{addr:x}={b:02x}")
    if after.status is not Status.RUNNING:
        parts.append(after.status.value.upper())
    return " ".join(parts)
