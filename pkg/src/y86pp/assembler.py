"""Assembler for the parenthesized Y86++ syntax.

Source is one or more function lists::

    (:name
      (irmovl 48 :imme1)
      (rmmovl :imme1 -24 (:ebp))
      :L7
      (jbe :L7))

Registers and labels are ``:word`` tokens, memory operands are
``disp (:reg)`` with a mandatory decimal displacement, and ``;`` starts a
comment.  Hex literals with an ``0x`` prefix are accepted as an extension.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import isa
from .isa import JUMPS, SHAPES, Instruction
from .state import MASK32, REG_BY_NAME, MachineState


class AsmError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        where = f"line {line}, col {col}: " if line else ""
        super().__init__(where + message)
        self.message = message
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Label:
    name: str
    line: int = 0
    col: int = 0


@dataclass(frozen=True)
class Instr:
    """Source-level instruction; ``target`` is a label for jumps and calls."""

    mnemonic: str
    ra: Optional[int] = None
    rb: Optional[int] = None
    const: Optional[int] = None
    target: Optional[str] = None
    line: int = 0
    col: int = 0

    @property
    def length(self) -> int:
        return isa.instruction_length(self.mnemonic)


AsmItem = Union[Label, Instr]


@dataclass
class ProgramImage:
    base: int
    data: bytes
    symbols: Dict[str, int] = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.base + len(self.data)

    def symbol(self, name: str) -> int:
        return self.symbols[name]


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>;[^\n]*)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<kw>:[A-Za-z_][A-Za-z0-9_]*)
  | (?P<num>[-+]?(?:0[xX][0-9a-fA-F]+|[0-9]+))(?![A-Za-z0-9_])
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> List[_Tok]:
    toks = []
    pos = 0
    line, line_start = 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise AsmError(f"malformed token {text[pos:pos + 12].split()[0]!r}",
                           line, pos - line_start + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        chunk = m.group()
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    return toks


def _read_tree(toks: List[_Tok]):
    """Nest tokens into lists: each list is (open-token, [children])."""
    stack: List[Tuple[_Tok, list]] = []
    top: list = []
    for t in toks:
        if t.kind == "lparen":
            stack.append((t, []))
        elif t.kind == "rparen":
            if not stack:
                raise AsmError("unbalanced ')'", t.line, t.col)
            opener, kids = stack.pop()
            node = (opener, kids)
            (stack[-1][1] if stack else top).append(node)
        else:
            (stack[-1][1] if stack else top).append(t)
    if stack:
        t = stack[-1][0]
        raise AsmError("unclosed '('", t.line, t.col)
    return top


# ---------------------------------------------------------------------------
# parser

def parse_program(text: str) -> List[AsmItem]:
    """Parse source text into a flat item sequence.

    Each top-level list contributes its name label followed by its items.
    """
    items: List[AsmItem] = []
    seen: Dict[str, Label] = {}

    def add_label(tok):
        name = tok.text[1:]
        if name.lower() in REG_BY_NAME:
            raise AsmError(f"label {name!r} collides with a register name",
                           tok.line, tok.col)
        if name in seen:
            raise AsmError(f"duplicate label {name!r}", tok.line, tok.col)
        lab = Label(name, tok.line, tok.col)
        seen[name] = lab
        items.append(lab)

    tree = _read_tree(_tokenize(text))
    if not tree:
        raise AsmError("empty program", 1, 1)
    for node in tree:
        if isinstance(node, _Tok):
            raise AsmError(f"unexpected {node.text!r} outside a function list",
                           node.line, node.col)
        opener, kids = node
        if not kids or not isinstance(kids[0], _Tok) or kids[0].kind != "kw":
            raise AsmError("function list must start with a :name label",
                           opener.line, opener.col)
        add_label(kids[0])
        for kid in kids[1:]:
            if isinstance(kid, _Tok):
                if kid.kind != "kw":
                    raise AsmError(f"unexpected token {kid.text!r}", kid.line, kid.col)
                add_label(kid)
            else:
                items.append(_parse_instr(*kid))
    return items


def _parse_instr(opener: _Tok, kids: list) -> Instr:
    if not kids or not isinstance(kids[0], _Tok) or kids[0].kind != "word":
        raise AsmError("instruction must start with a mnemonic", opener.line, opener.col)
    head = kids[0]
    m = head.text.lower()
    if m not in SHAPES:
        raise AsmError(f"unknown mnemonic {head.text!r}", head.line, head.col)
    ops = kids[1:]
    shape = SHAPES[m]
    pos = (head.line, head.col)

    def arity(n):
        if len(ops) != n:
            raise AsmError(f"{m} takes {n} operand(s), got {len(ops)}", *pos)

    if shape == "":
        arity(0)
        return Instr(m, line=pos[0], col=pos[1])
    if shape == "ab":
        arity(2)
        return Instr(m, ra=_reg(ops[0], m), rb=_reg(ops[1], m), line=pos[0], col=pos[1])
    if shape == "a":
        arity(1)
        return Instr(m, ra=_reg(ops[0], m), line=pos[0], col=pos[1])
    if shape == "Vb":
        arity(2)
        return Instr(m, const=_imm(ops[0], m), rb=_reg(ops[1], m),
                     line=pos[0], col=pos[1])
    if shape == "aDb":
        arity(3)
        disp, base = _mem(ops[1], ops[2], m)
        return Instr(m, ra=_reg(ops[0], m), const=disp, rb=base, line=pos[0], col=pos[1])
    if shape == "Dba":
        arity(3)
        disp, base = _mem(ops[0], ops[1], m)
        return Instr(m, const=disp, rb=base, ra=_reg(ops[2], m), line=pos[0], col=pos[1])
    # jumps and call
    arity(1)
    t = ops[0]
    if isinstance(t, _Tok) and t.kind == "kw":
        if t.text[1:].lower() in REG_BY_NAME:
            raise AsmError(f"{m} target must be a label, not a register", t.line, t.col)
        return Instr(m, target=t.text[1:], line=pos[0], col=pos[1])
    if isinstance(t, _Tok) and t.kind == "num":
        return Instr(m, const=_imm(t, m), line=pos[0], col=pos[1])
    raise AsmError(f"{m} expects a label target", *_where(t))


def _where(node) -> Tuple[int, int]:
    if isinstance(node, _Tok):
        return node.line, node.col
    return node[0].line, node[0].col


def _reg(node, m) -> int:
    if isinstance(node, _Tok) and node.kind == "kw":
        r = REG_BY_NAME.get(node.text[1:].lower())
        if r is not None:
            return int(r)
        raise AsmError(f"unknown register {node.text!r}", node.line, node.col)
    if isinstance(node, _Tok) and node.kind == "num" and m != "irmovl":
        raise AsmError(f"{m} does not take an immediate operand; only irmovl does",
                       node.line, node.col)
    raise AsmError(f"{m}: expected a register operand", *_where(node))


def _imm(node, m) -> int:
    if not (isinstance(node, _Tok) and node.kind == "num"):
        raise AsmError(f"{m}: expected an integer", *_where(node))
    v = int(node.text, 0)
    if not -(1 << 31) <= v <= MASK32:
        raise AsmError(f"integer {node.text} does not fit in 32 bits", node.line, node.col)
    return v & MASK32


def _mem(disp_node, base_node, m) -> Tuple[int, int]:
    disp = _imm(disp_node, m)
    if isinstance(base_node, _Tok):
        raise AsmError(f"{m}: expected a '(:reg)' memory base", base_node.line,
                       base_node.col)
    opener, kids = base_node
    if len(kids) != 1:
        raise AsmError(f"{m}: memory base must be a single register", opener.line,
                       opener.col)
    return disp, _reg(kids[0], m)


# ---------------------------------------------------------------------------
# assembler

def assemble(items: Sequence[AsmItem], base: int) -> ProgramImage:
    """Two-pass assembly: lay out addresses, then encode with resolved targets."""
    if not 0 <= base <= MASK32:
        raise AsmError(f"base 0x{base:x} outside the 32-bit address space")
    symbols: Dict[str, int] = {}
    addr = base
    for it in items:
        if isinstance(it, Label):
            if it.name in symbols:
                raise AsmError(f"duplicate label {it.name!r}", it.line, it.col)
            symbols[it.name] = addr
        else:
            addr += it.length
    if addr > 1 << 32:
        raise AsmError("image exceeds the 32-bit address space")
    out = bytearray()
    for it in items:
        if isinstance(it, Label):
            continue
        const = it.const
        if it.target is not None:
            if it.target not in symbols:
                raise AsmError(f"undefined label {it.target!r}", it.line, it.col)
            const = symbols[it.target]
        out += isa.encode(Instruction(it.mnemonic, it.ra, it.rb, const))
    return ProgramImage(base, bytes(out), symbols)


def assemble_text(text: str, base: int) -> ProgramImage:
    return assemble(parse_program(text), base)


def disassemble(image: ProgramImage) -> str:
    """Render an image back to source; re-assembling it yields the same bytes.

    Known symbols name their addresses; other in-image branch targets get
    synthesized ``L_<hex>`` labels and out-of-image targets stay numeric.
    """
    decoded: List[Tuple[int, Instruction]] = []
    off = 0
    data = image.data
    while off < len(data):
        def fetch(k, off=off):
            if off + k >= len(data):
                raise isa.DecodeError("truncated instruction", image.base + off)
            return data[off + k]
        try:
            ins = isa.decode_bytes(fetch, image.base + off)
        except isa.DecodeError as e:
            raise AsmError(f"cannot disassemble at offset {off}: {e}") from None
        decoded.append((image.base + off, ins))
        off += ins.length

    names: Dict[int, List[str]] = {}
    for name, a in sorted(image.symbols.items(), key=lambda kv: kv[1]):
        names.setdefault(a, []).append(name)
    starts = {a for a, _ in decoded} | {image.end}
    for _, ins in decoded:
        if ins.mnemonic in JUMPS or ins.mnemonic == "call":
            t = ins.const
            if t in starts and t not in names:
                names[t] = [f"L_{t:08x}"]
    if image.base not in names:
        names[image.base] = ["image"]

    lines = []
    first = names[image.base]
    lines.append(f"(:{first[0]}")
    for extra in first[1:]:
        lines.append(f"  :{extra}")
    for a, ins in decoded:
        if a != image.base:
            for n in names.get(a, ()):
                lines.append(f"  :{n}")
        if ins.mnemonic in JUMPS or ins.mnemonic == "call":
            t = ins.const
            lines.append(f"  ({ins.mnemonic} :{names[t][0]})" if t in names and t in starts
                         else f"  ({ins.mnemonic} {t})")
        else:
            lines.append("  " + str(ins))
    if image.end != image.base:
        for n in names.get(image.end, ()):
            lines.append(f"  :{n}")
    lines[-1] += ")"
    return "\n".join(lines) + "\n"


def load_image(state: MachineState, image: ProgramImage,
               registry: Optional[List[Tuple[int, int]]] = None) -> MachineState:
    """Copy of ``state`` with the image bytes written at its base.

    ``registry`` is the caller's list of already-loaded (start, end) spans;
    overlap raises AsmError, success appends the new span.
    """
    span = (image.base, image.end)
    if registry is not None:
        for lo, hi in registry:
            if span[0] < hi and lo < span[1]:
                raise AsmError(f"image at 0x{image.base:08x} overlaps loaded span "
                               f"[0x{lo:08x}, 0x{hi:08x})")
    s = state.copy()
    s.write_bytes(image.base, image.data)
    if registry is not None:
        registry.append(span)
    return s


# ---------------------------------------------------------------------------
# image files

IMAGE_MAGIC = "Y86PP1"


class ImageFormatError(ValueError):
    pass


def write_image(image: ProgramImage) -> str:
    """Serialize as: header, 16 hex bytes per line, then one SYM line per label."""
    lines = [f"{IMAGE_MAGIC} {image.base:08x} {len(image.data)}"]
    for i in range(0, len(image.data), 16):
        lines.append(" ".join(f"{b:02x}" for b in image.data[i:i + 16]))
    for name, addr in sorted(image.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        lines.append(f"SYM {name} {addr:08x}")
    return "\n".join(lines) + "\n"


def read_image(text: str) -> ProgramImage:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ImageFormatError("empty image file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != IMAGE_MAGIC:
        raise ImageFormatError(f"bad image header {lines[0]!r}")
    try:
        base = int(head[1], 16)
        length = int(head[2])
    except ValueError:
        raise ImageFormatError(f"bad image header {lines[0]!r}") from None
    data = bytearray()
    symbols: Dict[str, int] = {}
    for n, ln in enumerate(lines[1:], start=2):
        if ln.startswith("SYM "):
            parts = ln.split()
            if len(parts) != 3:
                raise ImageFormatError(f"line {n}: malformed symbol record")
            try:
                symbols[parts[1]] = int(parts[2], 16)
            except ValueError:
                raise ImageFormatError(f"line {n}: bad symbol address") from None
            continue
        if symbols:
            raise ImageFormatError(f"line {n}: byte data after symbol section")
        for tok in ln.split():
            if len(tok) != 2:
                raise ImageFormatError(f"line {n}: bad byte {tok!r}")
            try:
                data.append(int(tok, 16))
            except ValueError:
                raise ImageFormatError(f"line {n}: bad byte {tok!r}") from None
    if len(data) != length or not 0 <= base <= MASK32 or base + length > 1 << 32:
        raise ImageFormatError(f"header says {length} bytes at 0x{base:08x}, "
                               f"found {len(data)}")
    for name, addr in symbols.items():
        if not base <= addr <= base + length:
            raise ImageFormatError(f"symbol {name} outside image")
    return ProgramImage(base, bytes(data), symbols)
