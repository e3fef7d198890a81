"""MinVisor nested-page-table setup: Y86++ programs, native oracles, call harness.

The four routines (init_pdpt, init_pdts, sec_not_present, create_nested_pt)
ship as assembly under ``programs/``.  The ``oracle_*`` functions compute
the bytes each routine writes directly from its C semantics, so simulated
runs can be diffed against them.
"""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Mapping, Optional, Tuple

from . import isa
from .assembler import ProgramImage, assemble_text
from .state import MASK32, ConfigurationError, MachineState, Reg

PAGE_4K = 1 << 12
PAGE_2M = 1 << 21
GIB = 1 << 30
PDE_FLAGS = 1 | 2 | 4 | 32 | 64 | 128  # present, rw, user, accessed, dirty, pse
PDPTE_PRESENT = 1
STACK_SIZE = 4096

FUNCTIONS = ("init_pdpt", "init_pdts", "sec_not_present", "create_nested_pt")
SENTINEL = "halt_sentinel"
_LINK_ORDER = FUNCTIONS

MemoryDelta = Dict[int, int]


# ---------------------------------------------------------------------------
# programs

def program_source(name: str) -> str:
    if name not in FUNCTIONS:
        raise KeyError(f"unknown MinVisor function {name!r}")
    return resources.files("y86pp.programs").joinpath(f"{name}.y86").read_text()


def linked_source() -> str:
    """Sentinel halt followed by all four routines, as one source text."""
    parts = [f"(:{SENTINEL} (halt))"]
    parts += [program_source(n) for n in _LINK_ORDER]
    return "\n".join(parts)


@functools.lru_cache(maxsize=64)
def _linked_image(code_base: int) -> ProgramImage:
    return assemble_text(linked_source(), code_base)


def minvisor_image(code_base: int) -> ProgramImage:
    img = _linked_image(code_base)
    return ProgramImage(img.base, img.data, dict(img.symbols))


@functools.lru_cache(maxsize=1)
def code_size() -> int:
    return len(_linked_image(0).data)


def function_range(image: ProgramImage, name: str) -> Tuple[int, int]:
    """[start, end) of one routine inside the linked image."""
    starts = sorted((image.symbols[n], n) for n in (SENTINEL,) + _LINK_ORDER)
    for k, (addr, n) in enumerate(starts):
        if n == name:
            end = starts[k + 1][0] if k + 1 < len(starts) else image.end
            return addr, end
    raise KeyError(name)


# ---------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class NptParams:
    pdpt_base: int
    pdt_bases: Tuple[int, int, int, int]
    pdt_array_base: int
    visor_start: int
    visor_size: int
    stack_top: int
    code_base: int

    def regions(self) -> List[Tuple[str, int, int]]:
        out = [("code", self.code_base, self.code_base + code_size()),
               ("stack", self.stack_top - STACK_SIZE, self.stack_top),
               ("pdpt", self.pdpt_base, self.pdpt_base + 32),
               ("pdt_array", self.pdt_array_base, self.pdt_array_base + 16)]
        out += [(f"pdt{i}", b, b + PAGE_4K) for i, b in enumerate(self.pdt_bases)]
        return out

    def table_regions(self) -> List[Tuple[int, int]]:
        return [(lo, hi) for name, lo, hi in self.regions()
                if name == "pdpt" or name.startswith("pdt") and name != "pdt_array"]

    @property
    def visor_end(self) -> int:
        return self.visor_start + self.visor_size

    def problems(self) -> List[str]:
        """Violated preconditions; an empty list means the params are valid."""
        bad = []
        if len(self.pdt_bases) != 4:
            return ["exactly four PDT bases are required"]
        for name, v in [("pdpt_base", self.pdpt_base)] + [
                (f"pdt_bases[{i}]", b) for i, b in enumerate(self.pdt_bases)]:
            if v % PAGE_4K:
                bad.append(f"{name} 0x{v:x} not 4KiB aligned")
        if self.pdt_array_base % 4:
            bad.append("pdt_array_base not 4-byte aligned")
        if self.visor_start % PAGE_2M:
            bad.append("visor_start not 2MiB aligned")
        if self.visor_size <= 0 or self.visor_size % PAGE_2M:
            bad.append("visor_size not a non-zero multiple of 2MiB")
        gib_end = (self.visor_start // GIB + 1) * GIB
        if self.visor_end >= gib_end:
            bad.append("protected region must end strictly inside its 1GiB region")
        if self.stack_top % 16 or self.stack_top < STACK_SIZE or self.stack_top > 0xFFFFF000:
            bad.append("stack_top must be 16-byte aligned within [4KiB, 0xFFFFF000]")
        regs = self.regions()
        for name, lo, hi in regs:
            if lo < 0 or hi > 1 << 32:
                bad.append(f"{name} outside the 32-bit address space")
        for i, (n1, lo1, hi1) in enumerate(regs):
            for n2, lo2, hi2 in regs[i + 1:]:
                if lo1 < hi2 and lo2 < hi1:
                    bad.append(f"{n1} overlaps {n2}")
        return bad

    def validate(self) -> NptParams:
        bad = self.problems()
        if bad:
            raise ConfigurationError("; ".join(bad))
        return self

    def is_valid(self) -> bool:
        return not self.problems()


def random_params(rng: random.Random) -> NptParams:
    """Valid parameters with every structure on its own random 4KiB page."""
    pages = set()
    while len(pages) < 8:
        pages.add(rng.randrange(1, (1 << 20) - 1))
    code_p, stack_p, pdpt_p, arr_p, *pdt_ps = rng.sample(sorted(pages), 8)
    j = rng.randrange(4)
    first = rng.randrange(511)
    room = 511 - first
    count = rng.randint(1, min(room, 4)) if rng.random() < 0.5 else rng.randint(1, room)
    p = NptParams(
        pdpt_base=pdpt_p * PAGE_4K,
        pdt_bases=tuple(q * PAGE_4K for q in pdt_ps),
        pdt_array_base=arr_p * PAGE_4K + 4 * rng.randrange((PAGE_4K - 16) // 4),
        visor_start=j * GIB + first * PAGE_2M,
        visor_size=count * PAGE_2M,
        stack_top=(stack_p + 1) * PAGE_4K,
        code_base=code_p * PAGE_4K + 16 * rng.randrange((PAGE_4K - code_size()) // 16),
    )
    return p.validate()


SAMPLE_PARAMS = NptParams(
    pdpt_base=0x00100000,
    pdt_bases=(0x00101000, 0x00102000, 0x00103000, 0x00104000),
    pdt_array_base=0x00105000,
    visor_start=0x00400000,
    visor_size=0x00200000,
    stack_top=0x00090000,
    code_base=0x00007C00,
)


_PARAM_KEYS = ("pdpt_base", "pdt_bases", "pdt_array_base", "visor_start",
               "visor_size", "stack_top", "code_base")


def parse_params(text: str) -> NptParams:
    """Read ``key = value`` lines; ``#`` starts a comment.

    ``pdt_bases`` takes four comma-separated addresses.  Addresses are hex
    (with or without 0x); ``visor_size`` is decimal bytes unless prefixed 0x.
    """
    vals: Dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in _PARAM_KEYS:
            raise ConfigurationError(f"line {n}: unknown key {key!r}")
        try:
            if key == "pdt_bases":
                vals[key] = tuple(_hex(v) for v in value.split(","))
            elif key == "visor_size":
                vals[key] = int(value, 0)
            else:
                vals[key] = _hex(value)
        except ValueError:
            raise ConfigurationError(f"line {n}: bad value {value!r}") from None
    missing = [k for k in _PARAM_KEYS if k not in vals]
    if missing:
        raise ConfigurationError(f"missing keys: {', '.join(missing)}")
    return NptParams(**vals).validate()


def _hex(text: str) -> int:
    text = text.strip()
    return int(text[2:] if text.lower().startswith("0x") else text, 16)


def format_params(p: NptParams) -> str:
    return "\n".join([
        f"pdpt_base = 0x{p.pdpt_base:08x}",
        "pdt_bases = " + ", ".join(f"0x{b:08x}" for b in p.pdt_bases),
        f"pdt_array_base = 0x{p.pdt_array_base:08x}",
        f"visor_start = 0x{p.visor_start:08x}",
        f"visor_size = {p.visor_size}",
        f"stack_top = 0x{p.stack_top:08x}",
        f"code_base = 0x{p.code_base:08x}",
    ]) + "\n"


# ---------------------------------------------------------------------------
# oracles (C semantics)

def _put64(delta: MemoryDelta, addr: int, value: int) -> None:
    for k in range(8):
        delta[(addr + k) & MASK32] = (value >> (8 * k)) & 0xFF


def _get64(view: Mapping[int, int], addr: int) -> int:
    return sum(view.get((addr + k) & MASK32, 0) << (8 * k) for k in range(8))


def oracle_init_pdpt(p: NptParams) -> MemoryDelta:
    delta: MemoryDelta = {}
    for i in range(4):
        _put64(delta, p.pdpt_base + 8 * i, (p.pdt_bases[i] & MASK32) | PDPTE_PRESENT)
    return delta


def oracle_init_pdts(p: NptParams) -> MemoryDelta:
    delta: MemoryDelta = {}
    addr = 0
    for i in range(4):
        for j in range(512):
            _put64(delta, p.pdt_bases[i] + 8 * j, addr | PDE_FLAGS)
            addr += PAGE_2M
    return delta


def sec_not_present_indices(p: NptParams) -> Tuple[int, int, int]:
    """(pdpt index, start, end) exactly as the C code computes them."""
    j = (p.visor_start & MASK32) >> 30
    start = (p.visor_start & 0x3FE00000) >> 21
    end = (((p.visor_start + p.visor_size) & MASK32) & 0x3FE00000) >> 21
    return j, start, end


def oracle_sec_not_present(p: NptParams, pdpt_view: Mapping[int, int]) -> MemoryDelta:
    mask = ~((1 << 12) - 1) & 0xFFFFFFFFFFFFFFFF
    j, start, end = sec_not_present_indices(p)
    pdt = (_get64(pdpt_view, p.pdpt_base + 8 * j) & mask) & MASK32
    delta: MemoryDelta = {}
    for i in range(start, end):
        _put64(delta, pdt + 8 * i, 0)
    return delta


def oracle_create_nested_pt(p: NptParams) -> MemoryDelta:
    delta = oracle_init_pdpt(p)
    delta.update(oracle_init_pdts(p))
    delta.update(oracle_sec_not_present(p, delta))
    return delta


def oracle_return_value(fn: str, p: NptParams) -> Optional[int]:
    return p.pdpt_base if fn == "create_nested_pt" else None


def oracle_delta(fn: str, p: NptParams, before: Mapping[int, int]) -> MemoryDelta:
    """Oracle write set for ``fn`` given the memory it starts from."""
    if fn == "init_pdpt":
        return oracle_init_pdpt(p)
    if fn == "init_pdts":
        return oracle_init_pdts(p)
    if fn == "sec_not_present":
        return oracle_sec_not_present(p, before)
    if fn == "create_nested_pt":
        return oracle_create_nested_pt(p)
    raise KeyError(f"unknown MinVisor function {fn!r}")


# ---------------------------------------------------------------------------
# call harness

def call_arguments(fn: str, p: NptParams) -> List[int]:
    if fn == "init_pdpt":
        return [p.pdpt_base, p.pdt_array_base]
    if fn == "init_pdts":
        return [p.pdt_array_base]
    if fn == "sec_not_present":
        return [p.pdpt_base, p.visor_start, p.visor_size]
    if fn == "create_nested_pt":
        return [p.pdpt_base, p.pdt_array_base, p.visor_start, p.visor_size]
    raise ConfigurationError(f"unknown MinVisor function {fn!r}")


def default_preload(fn: str, p: NptParams) -> MemoryDelta:
    """Table contents a routine expects on entry (sec_not_present needs a PDPT)."""
    if fn == "sec_not_present":
        d = oracle_init_pdpt(p)
        d.update(oracle_init_pdts(p))
        return d
    return {}


def setup_call(fn: str, p: NptParams, *, image: Optional[ProgramImage] = None,
               preload: Optional[Mapping[int, int]] = None,
               background: Optional[Mapping[int, int]] = None,
               regs: Optional[Mapping[Reg, int]] = None) -> MachineState:
    """State poised to execute ``fn`` with paging off.

    Arguments are pushed right to left above a return address that points
    at a lone halt, so running the state stops when ``fn`` returns.
    ``background`` bytes are written first and may be overwritten by the
    code, pointer array, preload and stack contents.
    """
    args = call_arguments(fn, p)
    if image is None:
        image = minvisor_image(p.code_base)
    if fn not in image.symbols:
        raise ConfigurationError(f"image has no symbol {fn!r}")
    s = MachineState()
    if background:
        for a, b in background.items():
            s.memory[a & MASK32] = b & 0xFF
    s.write_bytes(image.base, image.data)
    for i, b in enumerate(p.pdt_bases):
        s.write32(p.pdt_array_base + 4 * i, b)
    for a, b in (default_preload(fn, p) if preload is None else preload).items():
        s.memory[a] = b
    sp = p.stack_top
    for value in reversed(args):
        sp -= 4
        s.write32(sp, value)
    sp -= 4
    s.write32(sp, image.symbols[SENTINEL])
    s.set_reg(Reg.ESP, sp)
    s.set_reg(Reg.EBP, p.stack_top)
    for r, v in (regs or {}).items():
        s.set_reg(r, v)
    s.eip = image.symbols[fn]
    return s


MAX_CALL_STEPS = 200_000


def run_call(fn: str, p: NptParams, max_steps: int = MAX_CALL_STEPS,
             **setup) -> Tuple[MachineState, MachineState, int]:
    """(initial state, final state, steps) for one harnessed call."""
    s0 = setup_call(fn, p, **setup)
    s1, n = isa.run(s0, max_steps)
    return s0, s1, n


def apply_delta(state: MachineState, delta: Mapping[int, int]) -> MachineState:
    s = state.copy()
    for a, b in delta.items():
        s.write_byte(a, b)
    return s


def enable_nested_paging(state: MachineState, cr3: int) -> MachineState:
    """Point CR3 at the tables and switch to guest mode (harness-only controls)."""
    s = state.copy()
    s.cr3 = cr3 & MASK32
    s.guest_mode = True
    return s


def tables_state(p: NptParams, delta: Optional[Mapping[int, int]] = None) -> MachineState:
    """Guest-mode state whose memory holds only the given (or oracle) tables."""
    s = MachineState()
    s.memory.update(oracle_create_nested_pt(p) if delta is None else delta)
    s.cr3 = p.pdpt_base
    s.guest_mode = True
    return s


def stratified_addresses(p: NptParams, rng: random.Random, n_inside: int,
                         n_outside: int) -> Tuple[List[int], List[int]]:
    """Sample addresses inside and outside the protected region.

    Both lists lead with the boundary cases (region edges, edges -/+1 byte
    and -/+1 2MiB page) and are topped up with uniform random draws.
    """
    lo, hi = p.visor_start, p.visor_end
    inside = [lo, lo + 1, hi - 1, hi - 2, lo + PAGE_2M - 1, hi - PAGE_2M]
    outside = [lo - 1, hi, hi + 1, lo - PAGE_2M, hi + PAGE_2M - 1, hi + PAGE_2M,
               0, MASK32]
    inside = [a for a in inside if lo <= a < hi]
    outside = [a & MASK32 for a in outside if 0 <= a <= MASK32 and not lo <= a < hi]
    while len(inside) < n_inside:
        inside.append(rng.randrange(lo, hi))
    while len(outside) < n_outside:
        a = rng.getrandbits(32)
        if not lo <= a < hi:
            outside.append(a)
    return inside[:n_inside], outside[:n_outside]
