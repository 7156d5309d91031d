"""Abstract syntax and the s-expression program format.

Statements and expressions are tagged tuples in A-normal form: operands of
binary operations, conditions, and send arguments must be values (integer
literals, local variables, or volatile fields). Persistent fields are read
with ``(load f)`` and written with ``(store f e)``; volatile fields are
plain values and are written with ``(vassign f e)``.

Grammar (s-expressions)::

    program  := (program class* init?)
    class    := (class NAME
                  (persistent (field int)*)?
                  (volatile (field int)*)?
                  (locals (var int)*)?
                  (handler stmt))
    stmt     := (skip) | (assign x expr) | (vassign f expr) | (store f expr)
              | (if value stmt stmt) | (seq stmt stmt+)
              | (create x CLASS) | (send value value value)
    expr     := value | (load f) | (OP value value) | (star)
    value    := INT | x | f          ; x includes x_s, x_e, x_p
    init     := (init (machine id CLASS)* (inbox id (event src type payload)*)*)

Creation records carry a per-class tag (a distinct negative event type), so
the global judgment can recover the class from an outbox entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import RsmError

SKIP = ("skip",)

SPECIAL_LOCALS = ("x_s", "x_e", "x_p")

BINOPS = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "=": lambda a, b: 1 if a == b else 0,
    "!=": lambda a, b: 1 if a != b else 0,
    "<": lambda a, b: 1 if a < b else 0,
    "<=": lambda a, b: 1 if a <= b else 0,
    ">": lambda a, b: 1 if a > b else 0,
    ">=": lambda a, b: 1 if a >= b else 0,
}


class ProgramSyntaxError(RsmError):
    pass


@dataclass(frozen=True)
class ClassDef:
    name: str
    persistent: dict            # field -> initial int
    volatile: dict              # field -> initial int
    locals: dict                # var -> initial int
    handler: tuple              # statement
    create_tag: int = 0         # assigned by Program


@dataclass
class Program:
    classes: dict = field(default_factory=dict)      # name -> ClassDef
    tag_to_class: dict = field(default_factory=dict)  # creation tag -> name
    init_machines: list = field(default_factory=list)  # (machine id, class name)
    init_inboxes: dict = field(default_factory=dict)   # id -> [(src,type,payload)]

    def add_class(self, cdef: ClassDef) -> ClassDef:
        tag = -(len(self.classes) + 1)
        tagged = ClassDef(cdef.name, cdef.persistent, cdef.volatile,
                          cdef.locals, cdef.handler, tag)
        self.classes[cdef.name] = tagged
        self.tag_to_class[tag] = cdef.name
        return tagged

    def cls(self, name: str) -> ClassDef:
        try:
            return self.classes[name]
        except KeyError:
            raise ProgramSyntaxError(f"unknown class {name!r}") from None

    def is_create_tag(self, tag: int) -> bool:
        return tag in self.tag_to_class


# -- s-expression reader ---------------------------------------------------------


def _tokenize(text: str):
    out = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in "()":
            out.append(c)
            i += 1
        elif c == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "();":
                j += 1
            out.append(text[i:j])
            i = j
    return out


def _read(tokens, pos=0):
    if pos >= len(tokens):
        raise ProgramSyntaxError("unexpected end of input")
    tok = tokens[pos]
    if tok == "(":
        items = []
        pos += 1
        while pos < len(tokens) and tokens[pos] != ")":
            item, pos = _read(tokens, pos)
            items.append(item)
        if pos >= len(tokens):
            raise ProgramSyntaxError("missing closing parenthesis")
        return items, pos + 1
    if tok == ")":
        raise ProgramSyntaxError("unexpected ')'")
    try:
        return int(tok), pos + 1
    except ValueError:
        return tok, pos + 1


def _read_all(text):
    tokens = _tokenize(text)
    forms = []
    pos = 0
    while pos < len(tokens):
        form, pos = _read(tokens, pos)
        forms.append(form)
    return forms


# -- program elaboration ------------------------------------------------------------


class _ClassContext:
    def __init__(self, name, persistent, volatile, locals_):
        self.name = name
        self.persistent = persistent
        self.volatile = volatile
        self.locals = dict(locals_)
        for special in SPECIAL_LOCALS:
            self.locals.setdefault(special, 0)

    def value(self, form):
        if isinstance(form, int):
            return ("int", form)
        if isinstance(form, str):
            if form in self.locals:
                return ("var", form)
            if form in self.volatile:
                return ("fld", form)
            if form in self.persistent:
                raise ProgramSyntaxError(
                    f"{self.name}: persistent field {form!r} must be read "
                    f"with (load {form})")
            raise ProgramSyntaxError(f"{self.name}: unbound name {form!r}")
        raise ProgramSyntaxError(
            f"{self.name}: expected a value in A-normal position, got {form!r}")

    def expr(self, form):
        if isinstance(form, (int, str)):
            return self.value(form)
        if not form:
            raise ProgramSyntaxError(f"{self.name}: empty expression")
        head = form[0]
        if head == "load":
            (_, fname) = form
            if fname not in self.persistent:
                raise ProgramSyntaxError(
                    f"{self.name}: (load {fname}) is not a persistent field")
            return ("load", fname)
        if head == "star":
            return ("star",)
        if head in BINOPS:
            if len(form) != 3:
                raise ProgramSyntaxError(f"{self.name}: {head} takes two values")
            return ("bin", head, self.value(form[1]), self.value(form[2]))
        raise ProgramSyntaxError(f"{self.name}: unknown expression {form!r}")

    def stmt(self, form, program_classes):
        if not isinstance(form, list) or not form:
            raise ProgramSyntaxError(f"{self.name}: bad statement {form!r}")
        head = form[0]
        if head == "skip":
            return SKIP
        if head == "assign":
            _, x, e = form
            if x not in self.locals:
                raise ProgramSyntaxError(f"{self.name}: unknown local {x!r}")
            return ("assign", x, self.expr(e))
        if head == "vassign":
            _, f, e = form
            if f not in self.volatile:
                raise ProgramSyntaxError(
                    f"{self.name}: vassign target {f!r} is not volatile")
            return ("vassign", f, self.expr(e))
        if head == "store":
            _, f, e = form
            if f not in self.persistent:
                raise ProgramSyntaxError(
                    f"{self.name}: store target {f!r} is not persistent")
            return ("store", f, self.expr(e))
        if head == "if":
            _, v, s1, s2 = form
            return ("if", self.value(v), self.stmt(s1, program_classes),
                    self.stmt(s2, program_classes))
        if head == "seq":
            if len(form) < 3:
                raise ProgramSyntaxError(f"{self.name}: seq needs two statements")
            stmts = [self.stmt(s, program_classes) for s in form[1:]]
            out = stmts[-1]
            for s in reversed(stmts[:-1]):
                out = ("seq", s, out)
            return out
        if head == "create":
            _, x, cname = form
            if x not in self.locals:
                raise ProgramSyntaxError(f"{self.name}: unknown local {x!r}")
            if cname not in program_classes:
                raise ProgramSyntaxError(f"{self.name}: create of unknown "
                                         f"class {cname!r}")
            return ("create", x, cname)
        if head == "send":
            _, v1, v2, v3 = form
            return ("send", self.value(v1), self.value(v2), self.value(v3))
        raise ProgramSyntaxError(f"{self.name}: unknown statement {head!r}")


def _bindings(forms):
    out = {}
    for f in forms:
        if not (isinstance(f, list) and len(f) == 2 and isinstance(f[0], str)
                and isinstance(f[1], int)):
            raise ProgramSyntaxError(f"expected (name int), got {f!r}")
        out[f[0]] = f[1]
    return out


def parse_program(text: str) -> Program:
    forms = _read_all(text)
    if len(forms) != 1 or not forms[0] or forms[0][0] != "program":
        raise ProgramSyntaxError("expected a single (program ...) form")
    program = Program()
    class_forms = []
    init_form = None
    for form in forms[0][1:]:
        if isinstance(form, list) and form and form[0] == "class":
            class_forms.append(form)
        elif isinstance(form, list) and form and form[0] == "init":
            init_form = form
        else:
            raise ProgramSyntaxError(f"unexpected top-level form {form!r}")

    # first pass: names (so create can reference any class)
    names = []
    for form in class_forms:
        if len(form) < 2 or not isinstance(form[1], str):
            raise ProgramSyntaxError("class needs a name")
        names.append(form[1])

    for form in class_forms:
        name = form[1]
        sections = {"persistent": [], "volatile": [], "locals": [], "handler": None}
        for section in form[2:]:
            if not isinstance(section, list) or not section:
                raise ProgramSyntaxError(f"{name}: bad class section {section!r}")
            kind = section[0]
            if kind in ("persistent", "volatile", "locals"):
                sections[kind] = section[1:]
            elif kind == "handler":
                if len(section) != 2:
                    raise ProgramSyntaxError(f"{name}: handler takes one statement")
                sections["handler"] = section[1]
            else:
                raise ProgramSyntaxError(f"{name}: unknown section {kind!r}")
        persistent = _bindings(sections["persistent"])
        volatile = _bindings(sections["volatile"])
        locals_ = _bindings(sections["locals"])
        if set(persistent) & set(volatile):
            raise ProgramSyntaxError(f"{name}: persistent and volatile overlap")
        ctx = _ClassContext(name, persistent, volatile, locals_)
        handler = (ctx.stmt(sections["handler"], names)
                   if sections["handler"] is not None else SKIP)
        program.add_class(ClassDef(name, persistent, volatile, ctx.locals, handler))

    if init_form is not None:
        for entry in init_form[1:]:
            if not isinstance(entry, list) or not entry:
                raise ProgramSyntaxError(f"bad init entry {entry!r}")
            if entry[0] == "machine":
                _, mid, cname = entry
                program.cls(cname)
                program.init_machines.append((mid, cname))
            elif entry[0] == "inbox":
                mid = entry[1]
                events = []
                for ev in entry[2:]:
                    if not (isinstance(ev, list) and len(ev) == 4
                            and ev[0] == "event"):
                        raise ProgramSyntaxError(f"bad inbox event {ev!r}")
                    events.append((ev[1], ev[2], ev[3]))
                program.init_inboxes[mid] = events
            else:
                raise ProgramSyntaxError(f"unknown init entry {entry[0]!r}")
    return program


RULE_NAMES = ("start", "local", "commit", "create", "send", "reset")


def parse_schedule(text: str) -> list[tuple[str, int]]:
    """One step per line: ``<rule> <machine id>``; '#' starts a comment."""
    steps = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in RULE_NAMES:
            raise ProgramSyntaxError(
                f"line {lineno}: expected '<rule> <machine>', got {line!r}")
        steps.append((parts[0], int(parts[1])))
    return steps
