"""Interpreter tests: parsing, rule behaviour, schedules, and the checks."""

import itertools
from random import Random

import pytest

from rsm.semantics import (
    ChoiceSource,
    LocalConfig,
    RuleNotApplicable,
    SKIP,
    StuckError,
    check_failure_transparency,
    check_local_equiv,
    check_non_interference,
    drive_to_quiescence,
    dump_trace,
    enumerate_reset_placements,
    eval_expr,
    initial_config,
    parse_program,
    parse_schedule,
    run_schedule,
    step_global,
    step_local,
)
from rsm.semantics.check import ShapeError, build_schedule, plan_base_run
from rsm.semantics.machine import run_handler
from rsm.semantics.programs import EXAMPLES, WORD_COUNT, word_count_inbox
from rsm.semantics.syntax import ProgramSyntaxError


def oracle(**kw):
    return ChoiceSource(**kw)


SMALL = """
(program
  (class A
    (persistent (hf 3))
    (volatile (seen 0))
    (locals (x 4) (y 0))
    (handler
      (seq
        (vassign seen (+ seen 1))
        (assign y (load hf))
        (if y (store hf x) (skip))
        (send 2 7 y))))
  (class B (handler (skip)))
  (init (machine 1 A) (machine 2 B) (inbox 1 (event 9 7 5)))
)
"""


# -- parsing ---------------------------------------------------------------------


def test_parse_and_validate_small_program():
    program = parse_program(SMALL)
    assert set(program.classes) == {"A", "B"}
    a = program.cls("A")
    assert a.persistent == {"hf": 3}
    assert a.volatile == {"seen": 0}
    assert a.locals["x"] == 4 and "x_p" in a.locals
    assert program.init_machines == [(1, "A"), (2, "B")]
    assert program.init_inboxes == {1: [(9, 7, 5)]}


@pytest.mark.parametrize("bad,fragment", [
    ("(program (class A (handler (store nope 1))))", "not persistent"),
    ("(program (class A (volatile (v 0)) (handler (assign v 1))))", "unknown local"),
    ("(program (class A (persistent (p 0)) (handler (send p 1 2))))", "load"),
    ("(program (class A (handler (create x Missing)) (locals (x 0))))", "unknown"),
    ("(program (class A (handler (if (+ 1 2) (skip) (skip)))))", "value"),
])
def test_parser_rejects_ill_formed_programs(bad, fragment):
    with pytest.raises(ProgramSyntaxError) as err:
        parse_program(bad)
    assert fragment in str(err.value)


def test_parse_schedule():
    steps = parse_schedule("start 1\nlocal 1  # handler\ncommit 1\n")
    assert steps == [("start", 1), ("local", 1), ("commit", 1)]
    with pytest.raises(ProgramSyntaxError):
        parse_schedule("jump 1")


# -- expression evaluation ---------------------------------------------------------


def test_eval_var_reads_environment():
    assert eval_expr({}, {"x": 4}, ("var", "x"), oracle()) == 4


def test_eval_binop():
    assert eval_expr({}, {}, ("bin", "+", ("int", 2), ("int", 3)), oracle()) == 5


def test_eval_star_recorded_then_replayed():
    src = oracle(star_tape=[9])
    assert eval_expr({}, {}, ("star",), src) == 9
    replay = ChoiceSource(replay=src.last_segment)
    assert eval_expr({}, {}, ("star",), replay) == 9


def test_eval_unbound_name_is_stuck():
    with pytest.raises(StuckError):
        eval_expr({}, {}, ("var", "zz"), oracle())


# -- local steps --------------------------------------------------------------------


def test_store_updates_field_map_and_finishes():
    cfg = LocalConfig((), {"f": 0}, {}, ("store", "f", ("int", 7)), 1)
    out = step_local(parse_program(SMALL), cfg, oracle())
    assert out.F["f"] == 7 and out.s == SKIP


def test_if_selects_else_branch_on_zero():
    cfg = LocalConfig((), {}, {"v": 0},
                      ("if", ("var", "v"), ("skip",), ("send", ("int", 1),
                                                       ("int", 2), ("int", 3))), 1)
    out = step_local(parse_program(SMALL), cfg, oracle())
    assert out.s[0] == "send"


def test_send_prepends_event():
    base = ((1, 1, 1),)
    cfg = LocalConfig(base, {}, {}, ("send", ("int", 7), ("int", 1), ("int", 5)), 1)
    out = step_local(parse_program(SMALL), cfg, oracle())
    assert out.E == ((7, 1, 5), (1, 1, 1))


def test_create_prepends_record_and_binds_fresh_id():
    program = parse_program(SMALL)
    cfg = LocalConfig((), {}, {"x": 0}, ("create", "x", "B"), 1)
    out = step_local(program, cfg, oracle(fresh_tape=[42]))
    tag = program.cls("B").create_tag
    assert out.E == ((42, tag, 0),)
    assert out.L["x"] == 42


# -- global steps ---------------------------------------------------------------------


def start_ready():
    program = parse_program(SMALL)
    return program, initial_config(program)


def test_g_start_initializes_specials_and_busy_bit():
    program, g = start_ready()
    out = step_global(g, "start", 1, oracle())
    m = out.M[1]
    assert m.b == 1
    assert (m.L["x_s"], m.L["x_e"], m.L["x_p"]) == (9, 7, 5)
    assert m.L["x"] == 4
    assert m.s == program.cls("A").handler
    assert out.Pi == g.Pi


def test_g_start_requires_rest_and_nonempty_inbox():
    program, g = start_ready()
    with pytest.raises(RuleNotApplicable):
        step_global(g, "start", 2, oracle())   # empty inbox
    busy = step_global(g, "start", 1, oracle())
    with pytest.raises(RuleNotApplicable):
        step_global(busy, "start", 1, oracle())


def test_g_commit_moves_effects_and_pops_inbox():
    program, g = start_ready()
    src = oracle()
    g = step_global(g, "start", 1, src)
    while g.M[1].s != SKIP:
        g = step_global(g, "local", 1, src)
    out = step_global(g, "commit", 1, src)
    rec = out.Pi[1]
    assert rec.I == ()                       # head removed
    assert rec.O == ((2, 7, 3),)             # send buffered by the handler
    assert rec.P == {"hf": 4}                # store hf x with x = 4
    assert out.M[1].b == 0 and out.M[1].E == ()
    assert rec.T == ()                       # trace grows only on delivery


def test_g_send_moves_event_appends_trace():
    program, g = start_ready()
    src = oracle()
    g = step_global(g, "start", 1, src)
    while g.M[1].s != SKIP:
        g = step_global(g, "local", 1, src)
    g = step_global(g, "commit", 1, src)
    out = step_global(g, "send", 1, src)
    assert out.Pi[1].O == ()
    assert out.Pi[1].T == ((2, 7, 3),)
    assert out.Pi[2].I == ((1, 7, 3),)       # inbox entry carries the source


def test_g_reset_restores_persistent_wipes_volatile_keeps_record():
    program, g = start_ready()
    src = oracle()
    mid = step_global(g, "start", 1, src)
    mid = step_global(mid, "local", 1, src)   # ran the vassign
    out = step_global(mid, "reset", 1, src)
    m = out.M[1]
    assert m.F == {"hf": 3, "seen": 0}        # P restored, volatile re-initialized
    assert m.E == () and m.L == {} and m.s == SKIP and m.b == 0
    assert out.Pi == mid.Pi                   # records untouched


def test_g_create_initializes_new_record_and_local_state():
    text = """
    (program
      (class Parent (locals (x 0)) (handler (create x Child)))
      (class Child (persistent (f 7)) (volatile (v 1)) (handler (skip)))
      (init (machine 1 Parent) (inbox 1 (event 9 1 0))))
    """
    program = parse_program(text)
    g = initial_config(program)
    src = oracle(fresh_tape=[50])
    g = step_global(g, "start", 1, src)
    while g.M[1].s != SKIP:
        g = step_global(g, "local", 1, src)
    g = step_global(g, "commit", 1, src)
    out = step_global(g, "create", 1, src)
    assert out.Pi[50].C == "Child"
    assert out.Pi[50].P == {"f": 7}
    assert out.Pi[50].I == () and out.Pi[50].O == () and out.Pi[50].T == ()
    assert out.M[50].at_rest()
    tag = program.cls("Child").create_tag
    assert out.Pi[1].T == ((50, tag, 0),)
    assert set(out.M) == set(out.Pi)


# -- schedules ----------------------------------------------------------------------------


def test_empty_schedule_returns_init():
    program, g = start_ready()
    final, traces, skipped = run_schedule(program, g, [])
    assert final is g and skipped == []
    assert traces == {1: (), 2: ()}


def test_word_count_trace_matches_sequential_oracle():
    program = parse_program(WORD_COUNT)
    words = [0, 1, 0]
    g = initial_config(program, inboxes=word_count_inbox(words))
    final, schedule = drive_to_quiescence(program, g)
    # sequential frequency oracle
    freqs = {}
    for w in words:
        freqs[w] = freqs.get(w, 0) + 1
    best = max(sorted(freqs), key=lambda w: freqs[w])
    expected_payload = freqs[best] * 10 + best
    max_trace = final.Pi[4].T
    assert max_trace[0] == (5, 11, expected_payload)
    # the recorded schedule replays to the same configuration
    replayed, traces, _ = run_schedule(program, initial_config(
        program, inboxes=word_count_inbox(words)), schedule)
    assert replayed.Pi == final.Pi
    assert dump_trace(traces).splitlines()[-1].startswith("5 ") is False


def test_interleaving_of_distinct_machines_commutes():
    program = parse_program(WORD_COUNT)
    words = [0, 1]
    base = initial_config(program, inboxes=word_count_inbox(words))
    # feed both counters, then interleave their handler steps two ways
    src = oracle()
    g = base
    for rule in ("start", "local", "local", "commit", "send"):
        g = step_global(g, rule, 1, src)
    for rule in ("start", "local", "local", "commit", "send"):
        g = step_global(g, rule, 1, src)
    g1 = step_global(g, "start", 2, src)
    g1 = step_global(g1, "start", 3, src)

    def run_locals(config, order):
        out = config
        for r in order:
            out = step_global(out, "local", r, oracle())
        return out

    a = run_locals(g1, [2, 3, 2, 3, 2, 3, 2, 3, 2, 3])
    b = run_locals(g1, [3, 2, 3, 2, 3, 2, 3, 2, 3, 2])
    assert a.M == b.M and a.Pi == b.Pi


def test_schedule_skip_mode_reports_inapplicable_steps():
    program, g = start_ready()
    final, _, skipped = run_schedule(
        program, g, [("commit", 1), ("start", 1)], skip_inapplicable=True)
    assert len(skipped) == 1 and skipped[0][1] == "commit"
    assert final.M[1].b == 1


# -- equivalence and non-interference ------------------------------------------------------


def test_local_equiv_ignores_volatile_fields_only():
    program = parse_program(SMALL)
    a = LocalConfig((), {"hf": 3, "seen": 0}, {"x": 1}, SKIP, 0)
    b = LocalConfig((), {"hf": 3, "seen": 9}, {"x": 1}, SKIP, 0)
    c = LocalConfig((), {"hf": 4, "seen": 0}, {"x": 1}, SKIP, 0)
    assert check_local_equiv(program, "A", a, a)
    assert check_local_equiv(program, "A", a, b)
    assert not check_local_equiv(program, "A", a, c)


def handler_start(program, cname, event=(9, 7, 5)):
    from rsm.semantics.machine import init_locals, reset_fields
    cdef = program.cls(cname)
    F = reset_fields(cdef, dict(cdef.persistent))
    return LocalConfig((), F, init_locals(cdef, *event), cdef.handler, 1)


def test_non_interference_passes_for_counter_style_volatile_use():
    program = parse_program(SMALL)   # volatile only incremented
    verdict = check_non_interference(program, "A", handler_start(program, "A"))
    assert verdict.passed


def test_non_interference_finds_volatile_leak():
    program = parse_program(EXAMPLES["volatile-leak"])
    verdict = check_non_interference(
        program, "Leaky", handler_start(program, "Leaky"))
    assert not verdict.passed
    assert verdict.counterexample == {"mood": 1}
    assert verdict.divergence_step is not None


def test_non_interference_trivial_without_volatile_reads():
    text = """(program (class P (persistent (p 0)) (volatile (v 0))
                (locals (t 0))
                (handler (seq (assign t (load p)) (send 2 1 t))))
              (class Q (handler (skip)))
              (init (machine 1 P) (machine 2 Q)))"""
    program = parse_program(text)
    verdict = check_non_interference(program, "P", handler_start(program, "P"))
    assert verdict.passed


# -- failure transparency ---------------------------------------------------------------------


def transparency_case(text, machine=1, **kw):
    program = parse_program(text)
    init = initial_config(program)
    locals_count, drain = plan_base_run(program, init, machine, **kw)
    return program, init, machine, locals_count, drain


def test_transparency_with_zero_resets_is_trivial():
    program, init, r, n, drain = transparency_case(EXAMPLES["three-sends"])
    schedule = build_schedule(r, n, drain)
    verdict = check_failure_transparency(program, init, r, schedule)
    assert verdict.passed and verdict.records_equal and verdict.local_equiv


def test_transparency_with_phase1_reset_and_retry():
    program, init, r, n, drain = transparency_case(EXAMPLES["three-sends"])
    for cut in range(n + 2):
        schedule = build_schedule(r, n, drain, phase1_resets=(cut,))
        verdict = check_failure_transparency(program, init, r, schedule)
        assert verdict.passed, (cut, verdict.detail)


def test_transparency_exhaustive_phase3_resets_three_send_handler():
    program, init, r, n, drain = transparency_case(EXAMPLES["three-sends"])
    assert len(drain) == 3
    for k in range(3):
        for gaps in itertools.combinations_with_replacement(range(len(drain) + 1), k):
            schedule = build_schedule(r, n, drain, phase3_reset_gaps=gaps)
            verdict = check_failure_transparency(program, init, r, schedule)
            assert verdict.records_equal and verdict.traces_equal, gaps
            assert verdict.passed


def test_transparency_rejects_malformed_shapes():
    program, init, r, n, drain = transparency_case(EXAMPLES["three-sends"])
    with pytest.raises(ShapeError):
        check_failure_transparency(program, init, r, [("start", 1), ("local", 1)])
    with pytest.raises(ShapeError):
        check_failure_transparency(
            program, init, r,
            [("start", 1)] + [("local", 1)] * n + [("commit", 1), ("local", 1)])


def test_volatile_leak_breaks_transparency_under_reset():
    """The leaky handler observes the volatile reset, so a pre-commit crash
    changes the committed outbox; the checker must catch it."""
    program = parse_program(EXAMPLES["volatile-leak"])
    init = initial_config(program)
    # make the pre-crash state differ from the post-reset one
    from rsm.semantics.machine import at_rest_config
    cdef = program.cls("Leaky")
    warm = dict(init.M[1].F)
    warm["mood"] = 7                       # a previous life left a mark
    init.M[1] = LocalConfig((), warm, {}, SKIP, 0)
    n, drain = plan_base_run(program, init, 1)
    schedule = build_schedule(1, n, drain, phase1_resets=(n + 1,))
    verdict = check_failure_transparency(program, init, 1, schedule)
    assert not verdict.passed


def test_reset_placement_enumeration_counts():
    placements = list(enumerate_reset_placements(2, 1, 2))
    # r=0: 1; r=1: cuts 4 + gaps 2; r=2: 16 + 4*2 + 3
    assert len(placements) == 1 + (4 + 2) + (16 + 8 + 3)


def test_ghost_trace_grows_only_on_create_and_send():
    rng = Random(5)
    program = parse_program(EXAMPLES["three-sends"])
    g = initial_config(program)
    src = oracle(seed=1)
    traces = {r: g.Pi[r].T for r in g.Pi}
    for _ in range(400):
        rule = rng.choice(["start", "local", "commit", "create", "send", "reset"])
        r = rng.choice(sorted(g.M))
        try:
            g2 = step_global(g, rule, r, src)
        except (RuleNotApplicable, StuckError):
            continue
        for machine, rec in g2.Pi.items():
            old = traces.get(machine, ())
            assert len(rec.T) >= len(old)
            if len(rec.T) > len(old):
                assert rule in ("create", "send")
                assert rec.T[len(rec.T) - len(old):] == old
            traces[machine] = rec.T
        g = g2
