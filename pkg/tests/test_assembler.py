"""Parser, two-pass assembler, disassembler, loader and image files."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malformed_sources import MALFORMED
from y86pp.assembler import (AsmError, ImageFormatError, Instr, Label, ProgramImage,
                             assemble, assemble_text, disassemble, load_image,
                             parse_program, read_image, write_image)
from y86pp.isa import JUMPS, SHAPES, Instruction, encode
from y86pp.minvisor import FUNCTIONS, linked_source, program_source
from y86pp.state import MASK32, MachineState, Reg


class TestParse:
    def test_label_and_ret(self):
        items = parse_program("(:f (ret))")
        assert [type(i) for i in items] == [Label, Instr]
        assert items[0].name == "f" and items[1].mnemonic == "ret"

    def test_memory_operand(self):
        (_, ins) = parse_program("(:f (mrmovl -28 (:ebp) :valu1))")
        assert (ins.mnemonic, ins.rb, ins.ra) == ("mrmovl", Reg.EBP, Reg.VALU1)
        assert ins.const == (-28) & MASK32

    def test_only_irmovl_takes_immediates(self):
        with pytest.raises(AsmError):
            parse_program("(:f (addl 5 :eax))")

    def test_comments_and_hex(self):
        items = parse_program("; header\n(:f ; entry\n (irmovl 0x1F :eax))")
        assert items[1].const == 31

    @pytest.mark.parametrize("name,text,line", MALFORMED, ids=[m[0] for m in MALFORMED])
    def test_errors_carry_line(self, name, text, line):
        with pytest.raises(AsmError) as ei:
            assemble_text(text, 0)
        assert ei.value.line == line
        assert f"line {line}," in str(ei.value)


class TestAssemble:
    def test_single_ret(self):
        img = assemble([Label("f"), Instr("ret")], 0x100)
        assert img.data == b"\x90" and img.symbols == {"f": 0x100}

    def test_forward_jump_is_absolute(self):
        img = assemble_text("(:f (jmp :L) (irmovl 1 :eax) :L (ret))", 0x100)
        # jmp (5 bytes) + irmovl (6 bytes): L sits at base + 11
        assert img.data[:5] == bytes([0x70]) + (0x100 + 11).to_bytes(4, "little")
        assert img.symbols["L"] == 0x10B

    def test_missing_label(self):
        with pytest.raises(AsmError):
            assemble_text("(:f (jmp :nowhere))", 0)

    def test_pde_constants_present(self):
        img = assemble_text(program_source("init_pdts"), 0x7C00)
        assert bytes([0x30, 0xF8, 0xE7, 0, 0, 0]) in img.data
        assert bytes([0x30, 0xF8]) + (2 * 1024 * 1024).to_bytes(4, "little") in img.data

    def test_linked_image_symbols(self):
        img = assemble_text(linked_source(), 0x7C00)
        assert img.data[0] == 0x00 and img.symbols["halt_sentinel"] == 0x7C00
        assert all(f in img.symbols for f in FUNCTIONS)


class TestDisassemble:
    def test_ret(self):
        assert disassemble(ProgramImage(0, b"\x90", {})).split() == ["(:image", "(ret))"]

    def test_bad_byte_names_offset(self):
        with pytest.raises(AsmError, match="offset 0"):
            disassemble(ProgramImage(0, b"\xC0", {}))

    @pytest.mark.parametrize("src", ["init_pdts", "linked"])
    def test_round_trip(self, src):
        text = linked_source() if src == "linked" else program_source(src)
        img = assemble_text(text, 0x7C00)
        again = assemble_text(disassemble(img), 0x7C00)
        assert again.data == img.data

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.sampled_from(sorted(SHAPES)), st.integers(0, 9),
                              st.integers(0, 9), st.integers(0, MASK32)),
                    min_size=1, max_size=20))
    def test_round_trip_random_code(self, spec):
        raw = b""
        for m, a, b, c in spec:
            shape = SHAPES[m]
            raw += encode(Instruction(m, ra=a if "a" in shape else None,
                                      rb=b if "b" in shape else None,
                                      const=c if any(k in shape for k in "VDT") else None))
        img = ProgramImage(0x4000, raw, {})
        assert assemble_text(disassemble(img), 0x4000).data == raw


class TestLoad:
    def test_load_places_bytes(self):
        s = load_image(MachineState(), ProgramImage(0x7C00, b"\x90", {}))
        assert s.memory[0x7C00] == 0x90

    def test_disjoint_and_overlapping(self):
        reg = []
        s = load_image(MachineState(), ProgramImage(0x100, b"\x90\x90", {}), reg)
        s = load_image(s, ProgramImage(0x200, b"\x00", {}), reg)
        assert s.memory[0x101] == 0x90 and s.memory[0x200] == 0
        with pytest.raises(AsmError):
            load_image(s, ProgramImage(0x101, b"\x10", {}), reg)


class TestImageFile:
    def test_round_trip(self):
        img = assemble_text(program_source("init_pdts"), 0x7C00)
        back = read_image(write_image(img))
        assert back == img

    def test_header(self):
        text = write_image(ProgramImage(0x100, b"\x90", {"f": 0x100}))
        assert text == "Y86PP1 00000100 1\n90\nSYM f 00000100\n"

    @pytest.mark.parametrize("text", ["", "Y86PP2 0 1\n90\n", "Y86PP1 100 2\n90\n",
                                      "Y86PP1 100 1\nzz\n", "Y86PP1 100 1\n90\nSYM f\n"])
    def test_corrupt(self, text):
        with pytest.raises(ImageFormatError):
            read_image(text)


def test_jump_mnemonics_all_assemble():
    for j in JUMPS:
        img = assemble_text(f"(:f :top ({j} :top))", 0x10)
        assert img.data[1:5] == (0x10).to_bytes(4, "little")
