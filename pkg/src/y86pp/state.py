"""Y86++ machine state: registers, flags, mode bits and sparse byte memory."""

from __future__ import annotations

import enum
from itertools import repeat
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

MASK32 = 0xFFFFFFFF


class Reg(enum.IntEnum):
    EAX = 0
    ECX = 1
    EDX = 2
    EBX = 3
    ESP = 4
    EBP = 5
    ESI = 6
    EDI = 7
    IMME1 = 8
    VALU1 = 9


NUM_REGS = len(Reg)
REG_NONE = 0xF

REG_BY_NAME = {r.name.lower(): r for r in Reg}


class Status(enum.Enum):
    RUNNING = "Running"
    HALTED = "Halted"
    FAULTED = "Faulted"


class FaultKind(enum.Enum):
    PAGE_FAULT = "PageFault"
    DECODE_ERROR = "DecodeError"
    HALT_INSTR = "HaltInstr"


@dataclass(frozen=True)
class FaultInfo:
    kind: FaultKind
    eip: int
    address: Optional[int] = None
    level: Optional[int] = None
    detail: str = ""

    def __post_init__(self):
        if (self.kind is FaultKind.PAGE_FAULT) != (self.address is not None):
            raise ValueError("only page faults carry a faulting address")

    def __str__(self):
        if self.kind is FaultKind.PAGE_FAULT:
            return (f"PageFault(va=0x{self.address:08x}, level={self.level}, "
                    f"eip=0x{self.eip:08x})")
        text = f"{self.kind.value}(eip=0x{self.eip:08x})"
        if self.detail:
            text += f": {self.detail}"
        return text


@dataclass
class Flags:
    zf: bool = False
    sf: bool = False
    of: bool = False
    cf: bool = False

    def copy(self) -> Flags:
        return Flags(self.zf, self.sf, self.of, self.cf)

    def as_tuple(self) -> Tuple[bool, bool, bool, bool]:
        return (self.zf, self.sf, self.of, self.cf)


class ConfigurationError(ValueError):
    """Raised for inconsistent memory layouts or harness configuration."""


@dataclass
class MachineState:
    eip: int = 0
    gpr: List[int] = field(default_factory=lambda: [0] * NUM_REGS)
    flags: Flags = field(default_factory=Flags)
    cr3: int = 0
    guest_mode: bool = False
    # mode-switch save slots; no instruction reads or writes them
    shadow: List[int] = field(default_factory=lambda: [0] * 4)
    memory: Dict[int, int] = field(default_factory=dict)
    status: Status = Status.RUNNING
    fault: Optional[FaultInfo] = None
    # predecode cache, owned by the executor; never part of equality
    _icache: Dict[int, tuple] = field(default_factory=dict, compare=False, repr=False)
    _icache_bytes: set = field(default_factory=set, compare=False, repr=False)

    def copy(self) -> MachineState:
        return MachineState(
            eip=self.eip,
            gpr=list(self.gpr),
            flags=self.flags.copy(),
            cr3=self.cr3,
            guest_mode=self.guest_mode,
            shadow=list(self.shadow),
            memory=dict(self.memory),
            status=self.status,
            fault=self.fault,
        )

    @property
    def running(self) -> bool:
        return self.status is Status.RUNNING

    def reg(self, r: Reg) -> int:
        return self.gpr[r]

    def set_reg(self, r: Reg, value: int) -> None:
        self.gpr[r] = value & MASK32

    # raw physical memory helpers; no translation

    def read_byte(self, addr: int) -> int:
        return self.memory.get(addr & MASK32, 0)

    def write_byte(self, addr: int, value: int) -> None:
        addr &= MASK32
        if addr in self._icache_bytes:
            self._icache.clear()
            self._icache_bytes.clear()
        self.memory[addr] = value & 0xFF

    def read_bytes(self, addr: int, n: int) -> bytes:
        addr &= MASK32
        if addr + n <= 1 << 32:
            return bytes(map(self.memory.get, range(addr, addr + n), repeat(0, n)))
        mem = self.memory
        return bytes(mem.get((addr + i) & MASK32, 0) for i in range(n))

    def write_bytes(self, addr: int, data: Iterable[int]) -> None:
        for i, b in enumerate(data):
            self.write_byte(addr + i, b)

    def read32(self, addr: int) -> int:
        return int.from_bytes(self.read_bytes(addr, 4), "little")

    def write32(self, addr: int, value: int) -> None:
        self.write_bytes(addr, (value & MASK32).to_bytes(4, "little"))

    def read64(self, addr: int) -> int:
        return int.from_bytes(self.read_bytes(addr, 8), "little")

    def write64(self, addr: int, value: int) -> None:
        self.write_bytes(addr, (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))


@dataclass(frozen=True)
class Region:
    """A named span of physical memory, optionally with initial contents."""

    name: str
    base: int
    size: int
    data: bytes = b""

    def __post_init__(self):
        if len(self.data) > self.size:
            raise ConfigurationError(f"region {self.name}: data larger than region")

    @property
    def end(self) -> int:
        return self.base + self.size

    def overlaps(self, other: Region) -> bool:
        return self.base < other.end and other.base < self.end


def make_initial_state(layout: Sequence[Region] = ()) -> MachineState:
    """Zeroed Running state with each region's bytes placed in memory.

    Raises ConfigurationError when regions overlap or leave the 32-bit space.
    """
    regions = list(layout)
    for r in regions:
        if r.base < 0 or r.size < 0 or r.end > 1 << 32:
            raise ConfigurationError(f"region {r.name} outside 32-bit address space")
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if a.size and b.size and a.overlaps(b):
                raise ConfigurationError(f"regions {a.name} and {b.name} overlap")
    state = MachineState()
    for r in regions:
        state.write_bytes(r.base, r.data)
    return state


def memories_equal(a: Dict[int, int], b: Dict[int, int]) -> bool:
    """Extensional equality: a stored zero equals an absent key."""
    return first_memory_difference(a, b) is None


def first_memory_difference(a: Dict[int, int], b: Dict[int, int]) -> Optional[int]:
    diffs = [k for k in a.keys() | b.keys() if a.get(k, 0) != b.get(k, 0)]
    return min(diffs) if diffs else None


def state_differences(actual: MachineState, expected: MachineState) -> List[str]:
    """Component-wise differences, memory compared with default-0 semantics."""
    out = []
    if actual.eip != expected.eip:
        out.append(f"eip: 0x{actual.eip:08x} != 0x{expected.eip:08x}")
    for r in Reg:
        if actual.gpr[r] != expected.gpr[r]:
            out.append(f"{r.name}: 0x{actual.gpr[r]:08x} != 0x{expected.gpr[r]:08x}")
    for name in ("zf", "sf", "of", "cf"):
        x, y = getattr(actual.flags, name), getattr(expected.flags, name)
        if x != y:
            out.append(f"{name.upper()}: {int(x)} != {int(y)}")
    if actual.cr3 != expected.cr3:
        out.append(f"cr3: 0x{actual.cr3:08x} != 0x{expected.cr3:08x}")
    if actual.guest_mode != expected.guest_mode:
        out.append(f"guest_mode: {actual.guest_mode} != {expected.guest_mode}")
    if actual.shadow != expected.shadow:
        out.append("shadow registers differ")
    if actual.status != expected.status or actual.fault != expected.fault:
        out.append(f"status: {actual.status.value} != {expected.status.value}")
    addr = first_memory_difference(actual.memory, expected.memory)
    if addr is not None:
        out.append(f"memory[0x{addr:08x}]: 0x{actual.memory.get(addr, 0):02x} "
                   f"!= 0x{expected.memory.get(addr, 0):02x}")
    return out
