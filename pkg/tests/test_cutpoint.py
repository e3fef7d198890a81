"""Cutpoint runner, the four VC checkers and the seeded trial driver."""

from __future__ import annotations

import random

import pytest

from y86pp.assembler import assemble_text
from y86pp.cutpoint import (CutpointSpec, VcKind, Verdict, check_entry_vc, check_exit_vc,
                            check_frame_vc, check_preservation_vc, replay, run_to_exit,
                            run_to_next_cutpoint, verify)
from y86pp.minvisor import FUNCTIONS, SAMPLE_PARAMS, minvisor_image, setup_call
from y86pp.specs import (LOOP_HEADS, build_spec, corrupt_modify, cutpoints_cut_all_cycles,
                         trial_factory)
from y86pp.state import MachineState, Reg

P = SAMPLE_PARAMS
IMAGE = minvisor_image(P.code_base)


def spec_and_state(fn: str):
    return build_spec(fn, P, IMAGE), setup_call(fn, P, image=IMAGE)


def harvest(spec: CutpointSpec, s0: MachineState, label: str, count: int = 3):
    addr = IMAGE.symbols[label]
    out = []
    run_to_exit(spec, s0, lambda i, s: out.append(s.copy())
                if s.eip == addr and len(out) < count else None)
    return out


class TestRunToNextCutpoint:
    def test_already_at_exit(self):
        spec, s0 = spec_and_state("init_pdts")
        s = s0.copy()
        s.eip = IMAGE.symbols["halt_sentinel"]
        seg = run_to_next_cutpoint(spec, s)
        assert seg.steps == 0 and seg.outcome == "exit" and seg.state is s

    def test_prologue_reaches_outer_loop_head(self):
        # 20 straight-line instructions and the jmp into the loop test
        spec, s0 = spec_and_state("init_pdts")
        seg = run_to_next_cutpoint(spec, s0)
        assert seg.outcome == "cutpoint" and seg.steps == 21
        assert seg.state.eip == IMAGE.symbols["L7"]

    def test_infinite_loop_exhausts_bound(self):
        img = assemble_text("(:spin :top (nop) (jmp :top))", 0x100)
        s = MachineState(eip=0x100)
        s.write_bytes(0x100, img.data)
        spec = CutpointSpec("spin", lambda s: True, lambda s: True, lambda s: False,
                            lambda s0, s: True, lambda s0: s0, lambda s: False,
                            step_bound=50, total_bound=500)
        seg = run_to_next_cutpoint(spec, s)
        assert seg.outcome == "bound" and seg.steps == 50
        run = run_to_exit(spec, s)
        assert run.outcome == "bound"
        assert check_exit_vc(spec, s, run).verdict is Verdict.INCONCLUSIVE


class TestEntry:
    def test_valid_state_passes(self):
        spec, s0 = spec_and_state("init_pdts")
        assert check_entry_vc(spec, s0).verdict is Verdict.PASS

    def test_misaligned_params_vacuous(self):
        bad = SAMPLE_PARAMS.__class__(**{**vars(P), "pdpt_base": P.pdpt_base + 8})
        spec = build_spec("init_pdpt", bad, IMAGE)
        s0 = setup_call("init_pdpt", bad, image=IMAGE)
        assert check_entry_vc(spec, s0).verdict is Verdict.VACUOUS

    def test_falsified_assertion_fails(self):
        spec, s0 = spec_and_state("init_pdts")
        spec.assertion = lambda a, b: False
        assert check_entry_vc(spec, s0).verdict is Verdict.FAIL


class TestPreservation:
    def test_inner_loop_snapshots_pass(self):
        spec, s0 = spec_and_state("init_pdts")
        for s in harvest(spec, s0, "L9"):
            r = check_preservation_vc(spec, s0, s)
            assert r.verdict is Verdict.PASS, r.detail

    def test_corrupted_counter_fails(self):
        spec, s0 = spec_and_state("init_pdts")
        s = harvest(spec, s0, "L9", 2)[-1]
        ebp = s.gpr[Reg.EBP]
        s.write32(ebp - 28, 600)
        assert check_preservation_vc(spec, s0, s).verdict is Verdict.FAIL

    def test_exit_delegates_to_equality(self):
        spec, s0 = spec_and_state("init_pdts")
        run = run_to_exit(spec, s0)
        r = check_preservation_vc(spec, s0, run.state)
        assert r.verdict is Verdict.PASS and r.cutpoint == "exit"


class TestExit:
    @pytest.mark.parametrize("fn", FUNCTIONS)
    def test_exit_and_frame_pass(self, fn):
        spec, s0 = spec_and_state(fn)
        run = run_to_exit(spec, s0)
        assert check_exit_vc(spec, s0, run).verdict is Verdict.PASS
        assert check_frame_vc(spec, s0, run).verdict is Verdict.PASS

    def test_wrong_modify_names_address(self):
        spec, s0 = spec_and_state("init_pdts")
        spec.modify = corrupt_modify(spec.modify, P, random.Random(1))
        r = check_exit_vc(spec, s0)
        assert r.verdict is Verdict.FAIL and "memory[0x" in r.detail

    def test_precondition_false_vacuous(self):
        spec, s0 = spec_and_state("init_pdts")
        s0.guest_mode = True
        assert check_exit_vc(spec, s0).verdict is Verdict.VACUOUS

    def test_stray_write_breaks_frame(self):
        spec, s0 = spec_and_state("init_pdpt")
        run = run_to_exit(spec, s0)
        run.state.write_byte(0x00DEAD00, 1)
        r = check_frame_vc(spec, s0, run)
        assert r.verdict is Verdict.FAIL and "0x00dead00" in r.detail


class TestDriver:
    def test_deterministic(self):
        a = verify(trial_factory("init_pdpt"), 3, 11, "init_pdpt")
        b = verify(trial_factory("init_pdpt"), 3, 11, "init_pdpt")
        assert a.records() == b.records() and a.lines() == b.lines()

    def test_replay_matches(self):
        s = verify(trial_factory("sec_not_present"), 2, 5, "sec_not_present")
        again = replay(trial_factory("sec_not_present"), 5, 1)
        assert [(r.kind, r.verdict, r.steps) for r in again] == \
            [(r.kind, r.verdict, r.steps) for t, r in s.reports if t == 1]

    @pytest.mark.parametrize("fn", ["init_pdpt", "sec_not_present", "create_nested_pt"])
    def test_clean_specs_pass(self, fn):
        s = verify(trial_factory(fn), 2, 0, fn)
        assert s.all_passed, s.lines()
        assert s.count(Verdict.PASS, VcKind.EXIT) == 2

    @pytest.mark.parametrize("mutation", ["binary", "modify"])
    def test_mutations_caught(self, mutation):
        s = verify(trial_factory("init_pdpt", mutation), 4, 0, "init_pdpt")
        assert s.failures and all(r.witness for _, r in s.failures)

    def test_inconclusive_is_not_a_pass(self):
        s = verify(trial_factory("init_pdts"), 1, 0, "init_pdts")
        assert s.all_passed
        _, r = s.reports[-2]
        r.verdict = Verdict.INCONCLUSIVE
        assert not s.all_passed


@pytest.mark.parametrize("fn", FUNCTIONS)
def test_cutpoints_cut_every_cycle(fn):
    assert cutpoints_cut_all_cycles(IMAGE, fn)


def test_loop_heads_are_labels():
    for fn, heads in LOOP_HEADS.items():
        assert all(h in IMAGE.symbols for h in heads), fn
