"""Mechanical checks over the calculus: equivalence of local states up to
volatile fields, non-interference of volatile fields, and failure
transparency of theorem-shaped runs.

A theorem-shaped run processes one event on one machine end to end:

    phase 1: any number of start / local / reset steps,
    then exactly one commit,
    phase 3: any number of create / send / reset steps draining the outbox.

Failure transparency says the run's final persistent records (hence traces)
match those of a reset-free run from an equivalent start, provided the
reset-free run replays the nondeterministic choices of the attempt that
committed. The check executes both runs and compares; with a reset after
the commit the machine's local environment is wiped, so the local-state
comparison is reported separately from the record comparison in that case.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from ..errors import RsmError
from .machine import (
    ChoiceSource,
    GlobalConfig,
    LocalConfig,
    RuleNotApplicable,
    StuckError,
    persistent_part,
    run_handler,
    step_global,
    step_local,
)
from .syntax import Program, SKIP


class ShapeError(RsmError):
    """A run does not have the theorem's phase structure."""


def check_local_equiv(program: Program, class_name: str, a: LocalConfig,
                      b: LocalConfig) -> bool:
    """Equality in every component except the volatile class fields."""
    cdef = program.cls(class_name)
    return (a.E == b.E
            and persistent_part(cdef, a.F) == persistent_part(cdef, b.F)
            and a.L == b.L
            and a.s == b.s
            and a.b == b.b)


# -- non-interference ---------------------------------------------------------------


@dataclass
class NonInterferenceVerdict:
    passed: bool
    counterexample: dict | None = None   # perturbed volatile assignment
    divergence_step: int | None = None
    detail: str = ""


def _local_trajectory(program, cfg, oracle, class_name):
    """Run to termination recording the equivalence-relevant projection of
    every intermediate configuration."""
    cdef = program.cls(class_name)
    snaps = []
    steps = 0
    while True:
        snaps.append((cfg.E, tuple(sorted(persistent_part(cdef, cfg.F).items())),
                      tuple(sorted(cfg.L.items())), cfg.s, cfg.b))
        if cfg.s == SKIP:
            return cfg, snaps
        cfg = step_local(program, cfg, oracle)
        steps += 1
        if steps > 100_000:
            raise StuckError("handler exceeded the step bound")


def check_non_interference(program: Program, class_name: str,
                           start: LocalConfig, *, star_domain=(0, 1, 2),
                           seed: int = 0,
                           volatile_domain=(0, 1)) -> NonInterferenceVerdict:
    """Run the handler, then re-run it from every volatile-field perturbation
    of the start with the same recorded choices; all terminal configurations
    must be equivalent."""
    cdef = program.cls(class_name)
    if start.s != cdef.handler:
        raise ShapeError("start configuration must hold the class handler")
    oracle = ChoiceSource(star_domain=star_domain, seed=seed)
    base_final, base_snaps = _local_trajectory(program, start, oracle, class_name)
    tape = oracle.last_segment

    names = sorted(cdef.volatile)
    for assignment in itertools.product(volatile_domain, repeat=len(names)):
        perturbed_F = dict(start.F)
        perturbed_F.update(dict(zip(names, assignment)))
        perturbed = LocalConfig(start.E, perturbed_F, dict(start.L), start.s, start.b)
        replay = ChoiceSource(star_domain=star_domain, seed=seed, replay=tape)
        try:
            final, snaps = _local_trajectory(program, perturbed, replay, class_name)
        except StuckError as exc:
            return NonInterferenceVerdict(False, dict(zip(names, assignment)),
                                          None, f"perturbed run stuck: {exc}")
        if not check_local_equiv(program, class_name, base_final, final):
            divergence = next(
                (i for i, (x, y) in enumerate(zip(base_snaps, snaps)) if x != y),
                min(len(base_snaps), len(snaps)))
            return NonInterferenceVerdict(
                False, dict(zip(names, assignment)), divergence,
                "terminal configurations differ beyond volatile fields")
    return NonInterferenceVerdict(True)


# -- theorem-shaped runs --------------------------------------------------------------


def theorem_shape_of(schedule, machine: int) -> tuple[int, int]:
    """Validate the phase structure; returns (commit index, reset count)."""
    commit_at = None
    resets = 0
    for index, (rule, r) in enumerate(schedule):
        if r != machine:
            raise ShapeError(f"step {index}: machine {r} is not {machine}")
        if rule == "reset":
            resets += 1
            continue
        if rule == "commit":
            if commit_at is not None:
                raise ShapeError(f"step {index}: second commit")
            commit_at = index
            continue
        if commit_at is None:
            if rule not in ("start", "local"):
                raise ShapeError(f"step {index}: {rule} before the commit")
        else:
            if rule not in ("create", "send"):
                raise ShapeError(f"step {index}: {rule} after the commit")
    if commit_at is None:
        raise ShapeError("no commit step")
    return commit_at, resets


def plan_base_run(program: Program, init: GlobalConfig, r: int, *,
                  star_domain=(0, 1, 2), seed: int = 0):
    """Execute the reset-free theorem run once to learn its shape: the number
    of local steps and the drain rules (create/send) after the commit."""
    oracle = ChoiceSource(star_domain=star_domain, seed=seed)
    g = step_global(init, "start", r, oracle)
    locals_count = 0
    while g.M[r].s != SKIP:
        g = step_global(g, "local", r, oracle)
        locals_count += 1
    g = step_global(g, "commit", r, oracle)
    drain = []
    while g.Pi[r].O:
        head_tag = g.Pi[r].O[-1][1]
        rule = "create" if program.is_create_tag(head_tag) else "send"
        g = step_global(g, rule, r, oracle)
        drain.append(rule)
    return locals_count, drain


def build_schedule(r: int, locals_count: int, drain, phase1_resets=(),
                   phase3_reset_gaps=()):
    """Assemble a theorem-shaped schedule.

    ``phase1_resets`` lists, per aborted attempt, the position at which it is
    cut: 0 resets the machine while still at rest; p in 1..locals_count+1
    runs start plus p-1 local steps first. ``phase3_reset_gaps`` lists drain
    gap indices (0..len(drain)) receiving a reset, one entry per reset.
    """
    schedule = []
    for pos in phase1_resets:
        if pos > 0:
            schedule.append(("start", r))
            schedule.extend(("local", r) for _ in range(pos - 1))
        schedule.append(("reset", r))
    schedule.append(("start", r))
    schedule.extend(("local", r) for _ in range(locals_count))
    schedule.append(("commit", r))
    gaps = sorted(phase3_reset_gaps)
    for index, rule in enumerate(drain):
        while gaps and gaps[0] == index:
            schedule.append(("reset", r))
            gaps.pop(0)
        schedule.append((rule, r))
    for _ in gaps:
        schedule.append(("reset", r))
    return schedule


def enumerate_reset_placements(locals_count: int, drain_len: int,
                               max_resets: int):
    """Every way to place up to ``max_resets`` resets into a theorem run."""
    positions = range(locals_count + 2)        # abort point of one attempt
    gaps = range(drain_len + 1)
    for total in range(max_resets + 1):
        for r1 in range(total + 1):
            r3 = total - r1
            for attempt_cuts in itertools.product(positions, repeat=r1):
                for gap_choice in itertools.combinations_with_replacement(gaps, r3):
                    yield attempt_cuts, gap_choice


# -- failure transparency ----------------------------------------------------------------


@dataclass
class TransparencyVerdict:
    passed: bool
    records_equal: bool
    traces_equal: bool
    local_equiv: bool
    reset_after_commit: bool
    resets: int = 0
    detail: str = ""

    @property
    def refinement_holds(self) -> bool:
        # a trailing reset legitimately clears L; the record comparison is
        # the theorem's observable content
        return self.records_equal and self.traces_equal and (
            self.local_equiv or self.reset_after_commit)


def run_with_resets(program: Program, init: GlobalConfig, r: int, schedule, *,
                    star_domain=(0, 1, 2), seed: int = 0):
    """Execute a theorem-shaped schedule, recording choices per attempt.

    Returns (final config, committing attempt's choice tape, had a reset
    after the commit)."""
    commit_at, _ = theorem_shape_of(schedule, r)
    oracle = ChoiceSource(star_domain=star_domain, seed=seed)
    g = init
    committed_tape = None
    reset_after_commit = False
    for index, (rule, _) in enumerate(schedule):
        g = step_global(g, rule, r, oracle)
        if index == commit_at:
            committed_tape = oracle.last_segment
        if rule == "reset" and index > commit_at:
            reset_after_commit = True
    return g, committed_tape, reset_after_commit


def check_failure_transparency(program: Program, init: GlobalConfig, r: int,
                               schedule, *, star_domain=(0, 1, 2),
                               seed: int = 0) -> TransparencyVerdict:
    """Execute the run with resets, then the reset-free run from the same
    start replaying the committing attempt's choices, and compare."""
    commit_at, resets = theorem_shape_of(schedule, r)
    final, tape, reset_after_commit = run_with_resets(
        program, init, r, schedule, star_domain=star_domain, seed=seed)

    replay = ChoiceSource(star_domain=star_domain, seed=seed, replay=tape)
    g = step_global(init, "start", r, replay)
    guard = 0
    while g.M[r].s != SKIP:
        g = step_global(g, "local", r, replay)
        guard += 1
        if guard > 100_000:
            raise StuckError("reset-free run exceeded the step bound")
    g = step_global(g, "commit", r, replay)
    while g.Pi[r].O:
        head_tag = g.Pi[r].O[-1][1]
        rule = "create" if program.is_create_tag(head_tag) else "send"
        g = step_global(g, rule, r, replay)

    records_equal = g.Pi == final.Pi
    traces_equal = all(
        g.Pi.get(k) is not None and final.Pi.get(k) is not None
        and g.Pi[k].T == final.Pi[k].T
        for k in set(g.Pi) | set(final.Pi))
    cdef_name = init.Pi[r].C
    local_equiv = check_local_equiv(program, cdef_name, g.M[r], final.M[r])
    detail = ""
    if not records_equal:
        detail = "persistent records diverge"
    elif not local_equiv and not reset_after_commit:
        detail = "terminal local states diverge"
    verdict = TransparencyVerdict(
        passed=False, records_equal=records_equal, traces_equal=traces_equal,
        local_equiv=local_equiv, reset_after_commit=reset_after_commit,
        resets=resets, detail=detail)
    verdict.passed = verdict.refinement_holds
    return verdict
