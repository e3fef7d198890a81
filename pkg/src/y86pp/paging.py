"""PAE-style nested translation with 2MiB pages.

A 4-entry PDPT (indexed by VA bits 31:30) points at 512-entry PDTs (bits
29:21); a present PDT entry maps a 2MiB frame.  Table walks read physical
memory directly.  Translation is active only in guest mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple, Union

from .state import MASK32, MachineState

PAGE_2M = 1 << 21
PRESENT = 1
CR3_MASK = 0xFFFFF000
PDE_FRAME_MASK = 0xFFE00000
OFFSET_MASK = PAGE_2M - 1


class PagingError(ValueError):
    pass


@dataclass(frozen=True)
class Physical:
    addr: int


@dataclass(frozen=True)
class PageFault:
    virtual_addr: int
    level: int  # 1: PDPT entry not present, 2: PDT entry not present

    def __post_init__(self):
        if self.level not in (1, 2):
            raise ValueError("page fault level must be 1 or 2")


TranslationOutcome = Union[Physical, PageFault]


@dataclass(frozen=True)
class PagingEntry:
    raw: int

    @property
    def present(self) -> bool:
        return bool(self.raw & PRESENT)

    @property
    def table_base(self) -> int:
        """Base of the next-level table (PDPT entry view, bits 31:12)."""
        return self.raw & CR3_MASK

    @property
    def frame_base(self) -> int:
        """Base of the mapped 2MiB frame (PDT entry view, bits 31:21)."""
        return self.raw & PDE_FRAME_MASK


def split_virtual(addr: int) -> Tuple[int, int, int]:
    addr &= MASK32
    return addr >> 30, (addr >> 21) & 0x1FF, addr & OFFSET_MASK


def join_virtual(pdpt_index: int, pdt_index: int, offset: int) -> int:
    return (pdpt_index << 30) | (pdt_index << 21) | offset


def read_entry64(state: MachineState, addr: int) -> int:
    if addr < 0 or addr + 7 > MASK32:
        raise PagingError(f"8-byte entry read at 0x{addr:08x} wraps the address space")
    mem = state.memory
    value = 0
    for i in range(7, -1, -1):
        value = (value << 8) | mem.get(addr + i, 0)
    return value


def paging_enabled(state: MachineState) -> bool:
    return state.guest_mode


def va_to_pa(addr: int, state: MachineState) -> TranslationOutcome:
    addr &= MASK32
    if not state.guest_mode:
        return Physical(addr)
    i, j, offset = split_virtual(addr)
    pdpte = read_entry64(state, (state.cr3 & CR3_MASK) + 8 * i)
    if not pdpte & PRESENT:
        return PageFault(addr, 1)
    # entry bits above 31 are ignored: guest RAM is limited to 4GiB
    pdte = read_entry64(state, (pdpte & CR3_MASK) + 8 * j)
    if not pdte & PRESENT:
        return PageFault(addr, 2)
    return Physical((pdte & PDE_FRAME_MASK) | offset)


def translate_mem_access(state: MachineState, base: int,
                         length: int) -> Union[List[int], PageFault]:
    """Physical addresses for each byte of an access, or the first fault."""
    if length not in (1, 4, 8):
        raise PagingError(f"unsupported access length {length}")
    if not state.guest_mode:
        return [(base + k) & MASK32 for k in range(length)]
    out = []
    for k in range(length):
        r = va_to_pa((base + k) & MASK32, state)
        if isinstance(r, PageFault):
            return r
        out.append(r.addr)
    return out


def dump_tables(state: MachineState, cr3: int) -> List[str]:
    """Stable text rendering of a PDPT and the PDTs it references."""
    lines = []
    pdpt = cr3 & CR3_MASK
    for i in range(4):
        e = PagingEntry(read_entry64(state, pdpt + 8 * i))
        lines.append(f"PDPT[{i}] raw=0x{e.raw:016x} P={int(e.present)} "
                     f"table=0x{e.table_base:08x}")
    for i in range(4):
        e = PagingEntry(read_entry64(state, pdpt + 8 * i))
        if not e.present:
            continue
        for j in range(512):
            d = PagingEntry(read_entry64(state, e.table_base + 8 * j))
            mapped = f"0x{d.frame_base:08x}" if d.present else "-"
            lines.append(f"PDT{i}[{j:3d}] raw=0x{d.raw:016x} P={int(d.present)} "
                         f"va=0x{join_virtual(i, j, 0):08x} pa={mapped}")
    return lines
