"""Seeded generator of small calculus programs for the transparency suite.

Generated handlers respect the volatile-field discipline by construction:
volatile fields may be written from anything, but they are only ever *read*
on the right-hand side of a volatile-field assignment. Nothing that flows
into locals, persistent stores, sends, creates, or branch conditions
depends on a volatile field, so the programs satisfy non-interference and
theorem-shaped runs must be failure transparent.
"""

from __future__ import annotations

from random import Random

from .syntax import parse_program

_OPS = ("+", "-", "*", "<", "=", ">")


class _Gen:
    def __init__(self, rng: Random, n_classes: int, handler_size: int,
                 creates_allowed: int):
        self.rng = rng
        self.n_classes = n_classes
        self.handler_size = handler_size
        self.creates_left = creates_allowed
        self.persistent = [f"p{i}" for i in range(rng.randint(1, 2))]
        self.volatile = [f"v{i}" for i in range(rng.randint(0, 2))]
        self.locals = [f"a{i}" for i in range(rng.randint(1, 2))]
        self.machine_ids = list(range(1, n_classes + 1))

    def value(self, allow_volatile=False):
        pool = [str(self.rng.randint(0, 3)), *self.locals, "x_p", "x_e"]
        if allow_volatile and self.volatile:
            pool += self.volatile
        return self.rng.choice(pool)

    def expr(self, allow_volatile=False):
        kind = self.rng.random()
        if kind < 0.35:
            return self.value(allow_volatile)
        if kind < 0.55:
            return f"(load {self.rng.choice(self.persistent)})"
        if kind < 0.7:
            return "(star)"
        op = self.rng.choice(_OPS)
        return (f"({op} {self.value(allow_volatile)} "
                f"{self.value(allow_volatile)})")

    def simple_stmt(self):
        choices = ["assign", "store", "send"]
        if self.volatile:
            choices.append("vassign")
        if self.creates_left > 0:
            choices.append("create")
        kind = self.rng.choice(choices)
        if kind == "assign":
            return f"(assign {self.rng.choice(self.locals)} {self.expr()})"
        if kind == "store":
            return f"(store {self.rng.choice(self.persistent)} {self.expr()})"
        if kind == "vassign":
            return (f"(vassign {self.rng.choice(self.volatile)} "
                    f"{self.expr(allow_volatile=True)})")
        if kind == "create":
            self.creates_left -= 1
            target = self.rng.randrange(self.n_classes)
            return f"(create {self.rng.choice(self.locals)} C{target})"
        dest = self.rng.choice(self.machine_ids)
        return f"(send {dest} {self.rng.randint(1, 5)} {self.value()})"

    def stmt(self, budget: int) -> tuple[str, int]:
        if budget >= 2 and self.rng.random() < 0.25:
            s1, used1 = f"(if {self.value()} ", 1
            left = self.simple_stmt()
            right = self.simple_stmt()
            return s1 + left + " " + right + ")", used1
        return self.simple_stmt(), 1

    def handler(self) -> str:
        parts = []
        budget = self.handler_size
        while budget > 0:
            s, used = self.stmt(budget)
            parts.append(s)
            budget -= used
        if len(parts) == 1:
            return parts[0]
        return "(seq " + " ".join(parts) + ")"


def generate_program(seed: int, *, max_machines: int = 3,
                     max_handler_size: int = 6, star_domain=(0, 1, 2)):
    """One seeded program plus its driver-machine id and an initial event.

    Returns (program text, program, machine id to run, star domain)."""
    rng = Random(seed)
    n_classes = rng.randint(1, max_machines - 1) if max_machines > 1 else 1
    handler_size = rng.randint(2, max_handler_size)
    creates_allowed = max_machines - n_classes
    gen = _Gen(rng, n_classes, handler_size, creates_allowed)

    lines = ["(program"]
    body = gen.handler()
    persistent = " ".join(f"({f} {rng.randint(0, 3)})" for f in gen.persistent)
    volatile = " ".join(f"({f} {rng.randint(0, 3)})" for f in gen.volatile)
    locals_ = " ".join(f"({x} 0)" for x in gen.locals)
    lines.append(f"  (class C0 (persistent {persistent}) (volatile {volatile})"
                 f" (locals {locals_}) (handler {body}))")
    for i in range(1, n_classes):
        lines.append(f"  (class C{i} (persistent (q 0)) (handler (skip)))")
    init = ["  (init"]
    for i in range(n_classes):
        init.append(f"    (machine {i + 1} C{i})")
    init.append(f"    (inbox 1 (event 90 {rng.randint(1, 5)}"
                f" {rng.randint(0, 3)})))")
    lines.extend(init)
    lines.append(")")
    text = "\n".join(lines)
    return text, parse_program(text), 1, star_domain
