"""Interpreter for the core machine calculus and its metatheory checks.

The calculus models each machine as a class with persistent and volatile
integer fields and a single handler statement; machines communicate through
events (destination, type, payload) and every machine carries a durable
record (inbox, outbox, persistent fields, and an append-only trace of its
observable sends and creations). A local small-step judgment reduces handler
statements; a global judgment schedules machines, commits handler effects
atomically, drains outboxes, and models crashes as resets that wipe exactly
the volatile half of a machine's state.

On top of the interpreter sit three mechanical checks: equivalence of local
states up to volatile fields, non-interference of volatile fields with
observable behaviour, and failure transparency (a run with resets produces
the same persistent records and traces as a reset-free run).
"""

from .syntax import (
    ClassDef,
    Program,
    SKIP,
    parse_program,
    parse_schedule,
)
from .machine import (
    ChoiceSource,
    GlobalConfig,
    LocalConfig,
    PersistentRecord,
    RuleNotApplicable,
    StuckError,
    drive_to_quiescence,
    dump_trace,
    eval_expr,
    initial_config,
    run_schedule,
    step_global,
    step_local,
)
from .check import (
    TransparencyVerdict,
    check_failure_transparency,
    check_local_equiv,
    check_non_interference,
    enumerate_reset_placements,
    run_with_resets,
    theorem_shape_of,
)
from .gen import generate_program

__all__ = [
    "ChoiceSource",
    "ClassDef",
    "GlobalConfig",
    "LocalConfig",
    "PersistentRecord",
    "Program",
    "RuleNotApplicable",
    "SKIP",
    "StuckError",
    "TransparencyVerdict",
    "check_failure_transparency",
    "check_local_equiv",
    "check_non_interference",
    "drive_to_quiescence",
    "dump_trace",
    "enumerate_reset_placements",
    "eval_expr",
    "generate_program",
    "initial_config",
    "parse_program",
    "parse_schedule",
    "run_schedule",
    "run_with_resets",
    "step_global",
    "step_local",
    "theorem_shape_of",
]
