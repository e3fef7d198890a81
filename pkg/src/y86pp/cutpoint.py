"""Inductive-assertion (cutpoint) checking over concrete Y86++ states.

A CutpointSpec annotates a routine with a precondition, cutpoints (entry,
loop heads, exit), a two-state assertion and a modify function giving the
expected exit state.  The checkers here discharge the entry, preservation
and exit conditions on concrete states, plus a memory frame condition.
Passing means no counterexample was found on the states tried; it is not a
proof.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .isa import execute_in_place
from .state import MachineState, Reg, Status, state_differences


class VcKind(enum.Enum):
    ENTRY = "entry"
    PRESERVATION = "preservation"
    EXIT = "exit"
    FRAME = "frame"


class Verdict(enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"
    VACUOUS = "vacuous"


@dataclass
class CutpointSpec:
    name: str
    precondition: Callable[[MachineState], bool]
    in_main: Callable[[MachineState], bool]
    cutpoint: Callable[[MachineState], bool]
    assertion: Callable[[MachineState, MachineState], bool]
    modify: Callable[[MachineState], MachineState]
    exit: Callable[[MachineState], bool]
    step_bound: int
    total_bound: int
    # writable memory spans given the initial state and stack low-water mark
    frame: Optional[Callable[[MachineState, int], List[Tuple[int, int]]]] = None
    cutpoint_names: Dict[int, str] = field(default_factory=dict)
    # optional diagnostic for a failed assertion
    explain: Optional[Callable[[MachineState, MachineState], str]] = None

    def label(self, s: MachineState) -> str:
        return self.cutpoint_names.get(s.eip, f"0x{s.eip:08x}")


@dataclass
class VcReport:
    kind: VcKind
    verdict: Verdict
    steps: int = 0
    cutpoint: str = ""
    detail: str = ""
    witness: Optional[Dict[str, object]] = None

    @property
    def passed(self) -> bool:
        return self.verdict in (Verdict.PASS, Verdict.VACUOUS)


@dataclass
class Segment:
    state: MachineState
    steps: int
    outcome: str  # "cutpoint", "exit", "bound" or "stopped"


def _advance(spec: CutpointSpec, s: MachineState, bound: int) -> Tuple[int, str]:
    """Step ``s`` in place to the next cutpoint or exit (at least one step)."""
    if spec.exit(s):
        return 0, "exit"
    n = 0
    cut = spec.cutpoint
    ex = spec.exit
    while n < bound:
        if s.status is not Status.RUNNING:
            return n, "stopped"
        execute_in_place(s)
        n += 1
        if s.status is not Status.RUNNING:
            return n, "stopped"
        if ex(s):
            return n, "exit"
        if cut(s):
            return n, "cutpoint"
    return n, "bound"


def run_to_next_cutpoint(spec: CutpointSpec, s: MachineState,
                         bound: Optional[int] = None) -> Segment:
    """Run a copy of ``s`` to the next cutpoint, exit, stop or step bound."""
    if spec.exit(s):
        return Segment(s, 0, "exit")
    work = s.copy()
    n, outcome = _advance(spec, work, spec.step_bound if bound is None else bound)
    return Segment(work, n, outcome)


def _assertion_detail(spec, s0, s) -> str:
    if spec.explain is not None:
        return spec.explain(s0, s)
    return "assertion false"


def _exit_equality(spec: CutpointSpec, s0: MachineState, s: MachineState,
                   steps: int, kind: VcKind) -> VcReport:
    if spec.in_main(s):
        return VcReport(kind, Verdict.FAIL, steps, "exit",
                        "exit state still inside the routine")
    diffs = state_differences(s, spec.modify(s0))
    if diffs:
        return VcReport(kind, Verdict.FAIL, steps, "exit",
                        "exit state differs from modify: " + "; ".join(diffs[:4]))
    return VcReport(kind, Verdict.PASS, steps, "exit")


def _stopped_report(kind, seg: Segment, where: str) -> VcReport:
    s = seg.state
    what = str(s.fault) if s.fault is not None else s.status.value
    return VcReport(kind, Verdict.FAIL, seg.steps, where,
                    f"machine stopped before reaching a cutpoint: {what}")


def check_entry_vc(spec: CutpointSpec, s0: MachineState) -> VcReport:
    if not spec.precondition(s0):
        return VcReport(VcKind.ENTRY, Verdict.VACUOUS, detail="precondition false")
    if not spec.assertion(s0, s0):
        return VcReport(VcKind.ENTRY, Verdict.FAIL, cutpoint=spec.label(s0),
                        detail=_assertion_detail(spec, s0, s0))
    return VcReport(VcKind.ENTRY, Verdict.PASS, cutpoint=spec.label(s0))


def check_preservation_vc(spec: CutpointSpec, s0: MachineState,
                          s: MachineState) -> VcReport:
    """From a cutpoint state satisfying the assertion, the next cutpoint does too."""
    kind = VcKind.PRESERVATION
    where = spec.label(s)
    if spec.exit(s):
        return _exit_equality(spec, s0, s, 0, kind)
    if not spec.assertion(s0, s):
        return VcReport(kind, Verdict.FAIL, 0, where,
                        "assertion violated at starting cutpoint: "
                        + _assertion_detail(spec, s0, s))
    seg = run_to_next_cutpoint(spec, s)
    if seg.outcome == "bound":
        return VcReport(kind, Verdict.INCONCLUSIVE, seg.steps, where,
                        "step bound exhausted before the next cutpoint")
    if seg.outcome == "stopped":
        return _stopped_report(kind, seg, where)
    if seg.outcome == "exit":
        return _exit_equality(spec, s0, seg.state, seg.steps, kind)
    nxt = spec.label(seg.state)
    if not spec.assertion(s0, seg.state):
        return VcReport(kind, Verdict.FAIL, seg.steps, f"{where}->{nxt}",
                        _assertion_detail(spec, s0, seg.state))
    return VcReport(kind, Verdict.PASS, seg.steps, f"{where}->{nxt}")


@dataclass
class ExitRun:
    state: MachineState
    steps: int
    outcome: str
    low_water: int
    visits: List[Tuple[int, int]]  # (visit index, eip) of each cutpoint reached


def run_to_exit(spec: CutpointSpec, s0: MachineState,
                on_cutpoint: Optional[Callable[[int, MachineState], None]] = None
                ) -> ExitRun:
    """Chain cutpoint segments from ``s0`` until exit, stop or total bound."""
    s = s0.copy()
    total = 0
    low = s.gpr[Reg.ESP]
    visits = []
    outcome = "exit" if spec.exit(s) else "cutpoint"
    while outcome == "cutpoint":
        budget = min(spec.step_bound, spec.total_bound - total)
        if budget <= 0:
            outcome = "bound"
            break
        # inline segment loop so the stack low-water mark is tracked per step
        n = 0
        outcome = "bound"
        while n < budget:
            if s.status is not Status.RUNNING:
                outcome = "stopped"
                break
            execute_in_place(s)
            n += 1
            sp = s.gpr[Reg.ESP]
            if sp < low:
                low = sp
            if s.status is not Status.RUNNING:
                outcome = "stopped"
                break
            if spec.exit(s):
                outcome = "exit"
                break
            if spec.cutpoint(s):
                outcome = "cutpoint"
                break
        total += n
        if outcome == "cutpoint":
            visits.append((len(visits), s.eip))
            if on_cutpoint is not None:
                on_cutpoint(len(visits) - 1, s)
    return ExitRun(s, total, outcome, low, visits)


def check_exit_vc(spec: CutpointSpec, s0: MachineState,
                  run: Optional[ExitRun] = None) -> VcReport:
    kind = VcKind.EXIT
    if not spec.precondition(s0):
        return VcReport(kind, Verdict.VACUOUS, detail="precondition false")
    r = run if run is not None else run_to_exit(spec, s0)
    if r.outcome == "bound":
        return VcReport(kind, Verdict.INCONCLUSIVE, r.steps, "",
                        "step bound exhausted before exit")
    if r.outcome == "stopped":
        return _stopped_report(kind, Segment(r.state, r.steps, r.outcome), "")
    return _exit_equality(spec, s0, r.state, r.steps, kind)


def check_frame_vc(spec: CutpointSpec, s0: MachineState, run: ExitRun) -> VcReport:
    """Every byte changed by the run lies inside the declared write set."""
    kind = VcKind.FRAME
    if spec.frame is None:
        return VcReport(kind, Verdict.VACUOUS, detail="no frame declared")
    if not spec.precondition(s0):
        return VcReport(kind, Verdict.VACUOUS, detail="precondition false")
    spans = spec.frame(s0, run.low_water)
    a, b = s0.memory, run.state.memory
    bad = [k for k in a.keys() | b.keys()
           if a.get(k, 0) != b.get(k, 0) and not any(lo <= k < hi for lo, hi in spans)]
    if bad:
        k = min(bad)
        return VcReport(kind, Verdict.FAIL, run.steps, "",
                        f"write outside frame at 0x{k:08x} "
                        f"(0x{a.get(k, 0):02x} -> 0x{b.get(k, 0):02x})")
    return VcReport(kind, Verdict.PASS, run.steps)


# ---------------------------------------------------------------------------
# trial driver


@dataclass
class Trial:
    """One generated verification instance."""

    spec: CutpointSpec
    s0: MachineState
    witness: Dict[str, object]


TrialFactory = Callable[[random.Random, int], Trial]


def choose_preservation_visits(visits: Sequence[Tuple[int, int]], rng: random.Random,
                               per_cutpoint: int = 6) -> List[int]:
    """Visit indices to re-check: every visit to a rarely hit cutpoint, and for
    hot ones the first two, the last two and a few random visits."""
    by_eip: Dict[int, List[int]] = {}
    for idx, eip in visits:
        by_eip.setdefault(eip, []).append(idx)
    chosen = set()
    for idxs in by_eip.values():
        if len(idxs) <= per_cutpoint + 4:
            chosen.update(idxs)
        else:
            chosen.update(idxs[:2] + idxs[-2:])
            chosen.update(rng.sample(idxs[2:-2], per_cutpoint))
    return sorted(chosen)


@dataclass
class VerifySummary:
    spec_name: str
    seed: int
    trials: int
    reports: List[Tuple[int, VcReport]] = field(default_factory=list)

    def count(self, verdict: Verdict, kind: Optional[VcKind] = None) -> int:
        return sum(1 for _, r in self.reports
                   if r.verdict is verdict and (kind is None or r.kind is kind))

    @property
    def failures(self) -> List[Tuple[int, VcReport]]:
        return [(t, r) for t, r in self.reports if r.verdict is Verdict.FAIL]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for _, r in self.reports) and bool(self.reports)

    def lines(self) -> List[str]:
        out = [f"verify {self.spec_name}: seed={self.seed} trials={self.trials}"]
        for kind in VcKind:
            counts = {v: self.count(v, kind) for v in Verdict}
            out.append(f"  {kind.value:<12} " + " ".join(
                f"{v.value}={counts[v]}" for v in Verdict))
        for t, r in self.failures[:10]:
            out.append(f"  FAIL trial={t} vc={r.kind.value} at={r.cutpoint or '-'}: "
                       f"{r.detail}")
        out.append("RESULT " + ("PASS" if self.all_passed else "FAIL"))
        return out

    def records(self, witness_paths: Optional[Mapping[int, str]] = None) -> List[str]:
        """Key-value report records, one per checked condition."""
        paths = witness_paths or {}
        out = []
        for t, r in self.reports:
            out.append(f"trial={t} vc={r.kind.value} verdict={r.verdict.value} "
                       f"seed={self.seed} steps={r.steps} "
                       f"cutpoint={r.cutpoint or '-'} witness={paths.get(t, '-')}")
        return out


def trial_rng(seed: int, trial: int) -> random.Random:
    return random.Random(f"{seed}/{trial}")


def verify_trial(trial: Trial, rng: random.Random,
                 per_cutpoint: int = 6) -> List[VcReport]:
    spec, s0 = trial.spec, trial.s0
    reports = [check_entry_vc(spec, s0)]
    if not spec.precondition(s0):
        return reports
    run = run_to_exit(spec, s0)
    picks = set(choose_preservation_visits(run.visits, rng, per_cutpoint))
    # the entry state is itself a cutpoint; its successor segment is checked too
    reports.append(check_preservation_vc(spec, s0, s0))
    snapshots: List[MachineState] = []
    if picks:
        run_to_exit(spec, s0, lambda i, s: snapshots.append(s.copy()) if i in picks else None)
    for s in snapshots:
        reports.append(check_preservation_vc(spec, s0, s))
    reports.append(check_exit_vc(spec, s0, run))
    reports.append(check_frame_vc(spec, s0, run))
    for r in reports:
        if r.verdict is Verdict.FAIL:
            r.witness = dict(trial.witness)
    return reports


def verify(factory: TrialFactory, trials: int, seed: int, spec_name: str = "",
           per_cutpoint: int = 6) -> VerifySummary:
    """Run ``trials`` independent generated trials; deterministic in ``seed``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    summary = VerifySummary(spec_name, seed, trials)
    for t in range(trials):
        rng = trial_rng(seed, t)
        trial = factory(rng, t)
        trial.witness.setdefault("seed", seed)
        trial.witness.setdefault("trial", t)
        for r in verify_trial(trial, rng, per_cutpoint):
            summary.reports.append((t, r))
    return summary


def replay(factory: TrialFactory, seed: int, trial: int,
           per_cutpoint: int = 6) -> List[VcReport]:
    """Re-run one trial exactly as verify() ran it."""
    rng = trial_rng(seed, trial)
    t = factory(rng, trial)
    t.witness.setdefault("seed", seed)
    t.witness.setdefault("trial", trial)
    return verify_trial(t, rng, per_cutpoint)
