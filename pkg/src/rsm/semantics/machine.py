"""The local and global judgments of the machine calculus.

Event lists are tuples ordered newest-first: a fresh event is prepended, and
queue consumption (inbox pop, outbox drain) takes the last element, so the
oldest event is served first. Each event is an integer triple; the first
component is the destination for outbox/trace entries and the source for
inbox entries.

A machine's local configuration is (E, F, L, s, b): buffered output events,
the field map over both persistent and volatile fields, the local
environment (which includes the three specials ``x_s``/``x_e``/``x_p`` for
the event under processing), the remaining handler statement, and the busy
bit. Its durable record is (class, I, O, P, T) where T is the append-only
trace of delivered sends and creations; T never influences execution and
exists so observable behaviour can be compared across runs.

Nondeterminism (the ``star`` expression and fresh-id choice) flows through a
:class:`ChoiceSource` that records every draw per handler attempt and can
replay a recorded attempt, which is how the metatheory checks re-run
handlers deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass
from random import Random

from ..errors import RsmError
from .syntax import BINOPS, ClassDef, Program, SKIP


class StuckError(RsmError):
    """No rule applies to the local configuration."""


class RuleNotApplicable(RsmError):
    """A global rule's premise does not hold; never silently proceeds."""


@dataclass(frozen=True)
class LocalConfig:
    E: tuple       # output events, newest first
    F: dict        # field map (persistent and volatile together)
    L: dict        # local environment
    s: tuple       # remaining statement
    b: int         # busy bit

    def at_rest(self) -> bool:
        return self.s == SKIP and self.b == 0 and not self.E


@dataclass(frozen=True)
class PersistentRecord:
    C: str         # class name
    I: tuple       # inbox, newest first
    O: tuple       # outbox, newest first
    P: dict        # persistent field map
    T: tuple       # ghost trace, newest first


@dataclass
class GlobalConfig:
    program: Program
    M: dict        # machine id -> LocalConfig
    Pi: dict       # machine id -> PersistentRecord

    def copy(self) -> "GlobalConfig":
        return GlobalConfig(self.program, dict(self.M), dict(self.Pi))


class ChoiceSource:
    """Records or replays the nondeterministic choices of handler attempts.

    A segment collects the draws (star values and fresh ids) of one handler
    attempt; ``begin_attempt`` opens a new segment. Replaying feeds a
    recorded segment back and falls back to fresh draws if the replayed run
    needs more choices than were recorded (which only happens when the runs
    have already diverged).
    """

    def __init__(self, star_domain=(0, 1, 2), seed: int = 0,
                 fresh_start: int = 1000, replay: list | None = None,
                 star_tape=None, fresh_tape=None):
        self._rng = Random(seed)
        self.star_domain = tuple(star_domain)
        self._fresh_next = fresh_start
        self.segments: list[list] = [[]]
        self._replay = list(replay) if replay is not None else None
        # explicit value queues take precedence; used to pin rule instances
        self._star_tape = list(star_tape) if star_tape else []
        self._fresh_tape = list(fresh_tape) if fresh_tape else []

    def begin_attempt(self) -> None:
        if self.segments[-1]:
            self.segments.append([])

    @property
    def last_segment(self) -> list:
        return list(self.segments[-1])

    def _draw(self, kind: str, fallback):
        if self._replay:
            tagged = self._replay.pop(0)
            if tagged[0] == kind:
                self.segments[-1].append(tagged)
                return tagged[1]
            self._replay = None   # diverged; fall through to fresh draws
        value = fallback()
        self.segments[-1].append((kind, value))
        return value

    def star(self) -> int:
        if self._star_tape:
            value = self._star_tape.pop(0)
            self.segments[-1].append(("star", value))
            return value
        return self._draw("star", lambda: self._rng.choice(self.star_domain))

    def fresh(self) -> int:
        if self._fresh_tape:
            value = self._fresh_tape.pop(0)
            self.segments[-1].append(("fresh", value))
            return value

        def alloc():
            value = self._fresh_next
            self._fresh_next += 1
            return value
        return self._draw("fresh", alloc)


# -- expression evaluation: F; L |- e => n ------------------------------------------


def eval_expr(F: dict, L: dict, e: tuple, oracle: ChoiceSource) -> int:
    tag = e[0]
    if tag == "int":
        return e[1]
    if tag == "var":
        try:
            return L[e[1]]
        except KeyError:
            raise StuckError(f"unbound local {e[1]!r}") from None
    if tag == "fld" or tag == "load":
        try:
            return F[e[1]]
        except KeyError:
            raise StuckError(f"unbound field {e[1]!r}") from None
    if tag == "bin":
        return BINOPS[e[1]](eval_expr(F, L, e[2], oracle),
                            eval_expr(F, L, e[3], oracle))
    if tag == "star":
        return oracle.star()
    raise StuckError(f"bad expression {e!r}")


# -- local statement reduction: E; F; L; s -> E1; F1; L1; s1 --------------------------


def step_local(program: Program, cfg: LocalConfig,
               oracle: ChoiceSource) -> LocalConfig:
    E, F, L, s = cfg.E, cfg.F, cfg.L, cfg.s
    tag = s[0]
    if tag == "skip":
        raise StuckError("skip does not step")
    if tag == "assign":
        n = eval_expr(F, L, s[2], oracle)
        L1 = dict(L)
        L1[s[1]] = n
        return LocalConfig(E, F, L1, SKIP, cfg.b)
    if tag == "vassign" or tag == "store":
        n = eval_expr(F, L, s[2], oracle)
        F1 = dict(F)
        F1[s[1]] = n
        return LocalConfig(E, F1, L, SKIP, cfg.b)
    if tag == "if":
        n = eval_expr(F, L, s[1], oracle)
        return LocalConfig(E, F, L, s[2] if n != 0 else s[3], cfg.b)
    if tag == "seq":
        s1, s2 = s[1], s[2]
        if s1 == SKIP:
            return LocalConfig(E, F, L, s2, cfg.b)
        inner = step_local(program, LocalConfig(E, F, L, s1, cfg.b), oracle)
        return LocalConfig(inner.E, inner.F, inner.L, ("seq", inner.s, s2), cfg.b)
    if tag == "create":
        n_r = oracle.fresh()
        cdef = program.cls(s[2])
        E1 = ((n_r, cdef.create_tag, 0),) + E
        L1 = dict(L)
        L1[s[1]] = n_r
        return LocalConfig(E1, F, L1, SKIP, cfg.b)
    if tag == "send":
        n1 = eval_expr(F, L, s[1], oracle)
        n2 = eval_expr(F, L, s[2], oracle)
        n3 = eval_expr(F, L, s[3], oracle)
        return LocalConfig(((n1, n2, n3),) + E, F, L, SKIP, cfg.b)
    raise StuckError(f"bad statement {s!r}")


def run_handler(program: Program, cfg: LocalConfig, oracle: ChoiceSource,
                max_steps: int = 100_000) -> LocalConfig:
    """Reduce until the statement is ``skip``; the grammar has no loops, so
    the bound exists only to flag interpreter bugs."""
    steps = 0
    while cfg.s != SKIP:
        cfg = step_local(program, cfg, oracle)
        steps += 1
        if steps > max_steps:
            raise StuckError("handler exceeded the step bound")
    return cfg


# -- auxiliary functions of the global judgment ----------------------------------------


def init_locals(cdef: ClassDef, n_s: int, n_e: int, n_p: int) -> dict:
    L = dict(cdef.locals)
    L["x_s"], L["x_e"], L["x_p"] = n_s, n_e, n_p
    return L


def reset_fields(cdef: ClassDef, P: dict) -> dict:
    F = dict(P)
    F.update(cdef.volatile)
    return F


def at_rest_config(cdef: ClassDef, P: dict) -> LocalConfig:
    return LocalConfig((), reset_fields(cdef, P), {}, SKIP, 0)


def persistent_part(cdef: ClassDef, F: dict) -> dict:
    return {f: F[f] for f in cdef.persistent}


# -- global judgment: S |- M; Pi -> M1; Pi1 ---------------------------------------------


def step_global(g: GlobalConfig, rule: str, r: int,
                oracle: ChoiceSource) -> GlobalConfig:
    program = g.program
    if r not in g.M or r not in g.Pi:
        raise RuleNotApplicable(f"unknown machine {r}")
    m = g.M[r]
    rec = g.Pi[r]
    cdef = program.cls(rec.C)

    if rule == "start":
        if m.E or m.s != SKIP or m.b != 0:
            raise RuleNotApplicable(f"start: machine {r} is not at rest")
        if rec.O:
            raise RuleNotApplicable(f"start: outbox of {r} is not empty")
        if not rec.I:
            raise RuleNotApplicable(f"start: inbox of {r} is empty")
        if persistent_part(cdef, m.F) != rec.P:
            raise RuleNotApplicable(
                f"start: persistent fields of {r} disagree with its record")
        n_s, n_e, n_p = rec.I[-1]
        oracle.begin_attempt()
        out = g.copy()
        out.M[r] = LocalConfig((), m.F, init_locals(cdef, n_s, n_e, n_p),
                               cdef.handler, 1)
        return out

    if rule == "local":
        if m.b != 1:
            raise RuleNotApplicable(f"local: machine {r} is not busy")
        if rec.O:
            raise RuleNotApplicable(f"local: outbox of {r} is not empty")
        out = g.copy()
        out.M[r] = step_local(program, m, oracle)
        return out

    if rule == "commit":
        if m.s != SKIP or m.b != 1:
            raise RuleNotApplicable(
                f"commit: machine {r} has not finished its handler")
        if rec.O:
            raise RuleNotApplicable(f"commit: outbox of {r} is not empty")
        if not rec.I:
            raise RuleNotApplicable(f"commit: inbox of {r} is empty")
        out = g.copy()
        out.M[r] = LocalConfig((), m.F, m.L, SKIP, 0)
        out.Pi[r] = PersistentRecord(rec.C, rec.I[:-1], m.E,
                                     persistent_part(cdef, m.F), rec.T)
        return out

    if rule == "create":
        if m.s != SKIP or m.b != 0:
            raise RuleNotApplicable(f"create: machine {r} is not at rest")
        if not rec.O:
            raise RuleNotApplicable(f"create: outbox of {r} is empty")
        r1, tag, _payload = rec.O[-1]
        if not program.is_create_tag(tag):
            raise RuleNotApplicable(
                f"create: outbox head of {r} is not a creation record")
        new_class = program.cls(program.tag_to_class[tag])
        out = g.copy()
        out.Pi[r] = PersistentRecord(rec.C, rec.I, rec.O[:-1], rec.P,
                                     ((r1, tag, 0),) + rec.T)
        out.Pi[r1] = PersistentRecord(new_class.name, (), (),
                                      dict(new_class.persistent), ())
        # the new machine joins at rest so every machine has a local state
        out.M[r1] = at_rest_config(new_class, out.Pi[r1].P)
        return out

    if rule == "send":
        if m.s != SKIP or m.b != 0:
            raise RuleNotApplicable(f"send: machine {r} is not at rest")
        if not rec.O:
            raise RuleNotApplicable(f"send: outbox of {r} is empty")
        r1, n_e, n_p = rec.O[-1]
        if program.is_create_tag(n_e):
            raise RuleNotApplicable(
                f"send: outbox head of {r} is a creation record")
        if r1 not in g.Pi:
            raise RuleNotApplicable(f"send: destination {r1} does not exist")
        dest = g.Pi[r1]
        out = g.copy()
        out.Pi[r] = PersistentRecord(rec.C, rec.I, rec.O[:-1], rec.P,
                                     ((r1, n_e, n_p),) + rec.T)
        out.Pi[r1] = PersistentRecord(dest.C, ((r, n_e, n_p),) + dest.I,
                                      dest.O, dest.P, dest.T)
        return out

    if rule == "reset":
        out = g.copy()
        out.M[r] = at_rest_config(cdef, rec.P)
        return out

    raise RuleNotApplicable(f"unknown rule {rule!r}")


# -- configurations and schedules ---------------------------------------------------------


def initial_config(program: Program, oracle: ChoiceSource | None = None,
                   machines=None, inboxes=None) -> GlobalConfig:
    """Build the starting configuration from the program's init section (or
    explicit machine/inbox lists); all machines begin at rest."""
    machines = list(machines) if machines is not None else list(program.init_machines)
    inboxes = dict(inboxes) if inboxes is not None else dict(program.init_inboxes)
    g = GlobalConfig(program, {}, {})
    for mid, cname in machines:
        cdef = program.cls(cname)
        inbox = tuple(reversed([tuple(e) for e in inboxes.get(mid, [])]))
        g.Pi[mid] = PersistentRecord(cname, inbox, (), dict(cdef.persistent), ())
        g.M[mid] = at_rest_config(cdef, g.Pi[mid].P)
    return g


def run_schedule(program: Program, init: GlobalConfig, schedule,
                 oracle: ChoiceSource | None = None, *,
                 skip_inapplicable: bool = False):
    """Apply *schedule* (a list of (rule, machine) pairs) to *init*.

    Returns (final configuration, traces, skipped) where traces maps each
    machine to its trace oldest-first and skipped lists the steps that did
    not apply (only populated with ``skip_inapplicable``)."""
    oracle = oracle or ChoiceSource()
    g = init
    skipped = []
    for index, (rule, r) in enumerate(schedule):
        try:
            g = step_global(g, rule, r, oracle)
        except RuleNotApplicable as exc:
            if not skip_inapplicable:
                raise RuleNotApplicable(f"step {index} ({rule} {r}): {exc}") from exc
            skipped.append((index, rule, r, str(exc)))
    traces = {r: tuple(reversed(rec.T)) for r, rec in g.Pi.items()}
    return g, traces, skipped


def dump_trace(traces: dict) -> str:
    """One delivered event per line: machine, destination, type, payload."""
    lines = []
    for r in sorted(traces):
        for dest, ev_type, payload in traces[r]:
            lines.append(f"{r} {dest} {ev_type} {payload}")
    return "\n".join(lines) + ("\n" if lines else "")


def drive_to_quiescence(program: Program, g: GlobalConfig,
                        oracle: ChoiceSource | None = None,
                        max_cycles: int = 100_000):
    """Round-robin driver: each ready machine processes one event end to end
    (start, locals, commit, full drain) until nothing is enabled.

    Returns (final config, the schedule taken) so the run can be replayed
    with :func:`run_schedule`."""
    oracle = oracle or ChoiceSource()
    schedule = []

    def apply(rule, r):
        nonlocal g
        g = step_global(g, rule, r, oracle)
        schedule.append((rule, r))

    for _ in range(max_cycles):
        progressed = False
        for r in sorted(g.M):
            m = g.M[r]
            rec = g.Pi[r]
            if rec.O and m.at_rest():
                while g.Pi[r].O:
                    tag = g.Pi[r].O[-1][1]
                    apply("create" if program.is_create_tag(tag) else "send", r)
                progressed = True
            m, rec = g.M[r], g.Pi[r]
            if rec.I and not rec.O and m.at_rest():
                apply("start", r)
                while g.M[r].s != SKIP:
                    apply("local", r)
                apply("commit", r)
                while g.Pi[r].O:
                    tag = g.Pi[r].O[-1][1]
                    apply("create" if program.is_create_tag(tag) else "send", r)
                progressed = True
        if not progressed:
            return g, schedule
    raise StuckError("driver exceeded its cycle bound")
