"""Direct transliteration of the calculus rules, used as the second
implementation in the rule-faithfulness tests.

Everything is written pattern-by-pattern against the figures: configurations
are plain tuples, event lists are tuples newest-first, premises are checked
explicitly, and a function returns None when its rule does not apply.
Nondeterministic choices (star values, fresh ids) are inputs, since the
rules only constrain them to be *some* integer. No code is shared with the
package's interpreter beyond the statement/expression tuple syntax.
"""

SKIP = ("skip",)

_BIN = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "=": lambda a, b: int(a == b),
    "!=": lambda a, b: int(a != b),
    "<": lambda a, b: int(a < b),
    "<=": lambda a, b: int(a <= b),
    ">": lambda a, b: int(a > b),
    ">=": lambda a, b: int(a >= b),
}


def eval_oracle(F, L, e, choices):
    """F; L |- e  evaluates to n.  `choices` supplies star values in order."""
    kind = e[0]
    if kind == "int":                 # literals evaluate to themselves
        return e[1]
    if kind == "var":                 # E-var:   F; L |- x  => L[x]
        return L[e[1]]
    if kind == "fld":                 # E-volatile: F; L |- f => F[f]
        return F[e[1]]
    if kind == "load":                # E-persistent: F; L |- load f => F[f]
        return F[e[1]]
    if kind == "bin":                 # E-binop
        n1 = eval_oracle(F, L, e[2], choices)
        n2 = eval_oracle(F, L, e[3], choices)
        return _BIN[e[1]](n1, n2)
    if kind == "star":                # E-star: any integer; take the next one
        return choices.pop(0)
    raise AssertionError(f"not an expression: {e!r}")


def step_local_oracle(classes, E, F, L, s, choices):
    """One step of  E; F; L; s -> E1; F1; L1; s1  (None if stuck)."""
    head = s[0]
    if head == "store" or head == "vassign":
        # L-store:  store f e  with  e => n  gives  E; F[f -> n]; L; skip
        n = eval_oracle(F, L, s[2], choices)
        F1 = dict(F)
        F1[s[1]] = n
        return E, F1, dict(L), SKIP
    if head == "assign":
        # assignment congruence:  x := e  with  e => n  gives  L[x -> n]
        n = eval_oracle(F, L, s[2], choices)
        L1 = dict(L)
        L1[s[1]] = n
        return E, dict(F), L1, SKIP
    if head == "if":
        # L-if: n != 0 picks s1, n == 0 picks s2
        n = eval_oracle(F, L, s[1], choices)
        return E, dict(F), dict(L), (s[2] if n != 0 else s[3])
    if head == "seq":
        # skip; s2 -> s2, otherwise step the first component
        if s[1] == SKIP:
            return E, dict(F), dict(L), s[2]
        inner = step_local_oracle(classes, E, F, L, s[1], choices)
        if inner is None:
            return None
        E1, F1, L1, s1 = inner
        return E1, F1, L1, ("seq", s1, s[2])
    if head == "create":
        # L-create: fresh n_r;  E1 = (n_r, n_C, 0), E;  L[x -> n_r]
        n_r = choices.pop(0)
        n_c = classes[s[2]]["tag"]
        L1 = dict(L)
        L1[s[1]] = n_r
        return ((n_r, n_c, 0),) + E, dict(F), L1, SKIP
    if head == "send":
        # L-send: arguments evaluate to n1 n2 n3;  E1 = (n1, n2, n3), E
        n1 = eval_oracle(F, L, s[1], choices)
        n2 = eval_oracle(F, L, s[2], choices)
        n3 = eval_oracle(F, L, s[3], choices)
        return ((n1, n2, n3),) + E, dict(F), dict(L), SKIP
    return None


def _persistent_of(classes, cname, F):
    return {f: F[f] for f in classes[cname]["persistent"]}


def g_start(classes, M, Pi, r):
    E, F, L, s, b = M[r]
    C, I, O, P, T = Pi[r]
    if E != () or s != SKIP or b != 0:
        return None
    if O != () or I == ():
        return None
    if _persistent_of(classes, C, F) != P:
        return None
    n_s, n_e, n_p = I[-1]                     # pattern  _, (n_s, n_e, n_p)
    L1 = dict(classes[C]["locals"])
    L1["x_s"], L1["x_e"], L1["x_p"] = n_s, n_e, n_p
    M1 = dict(M)
    M1[r] = ((), dict(F), L1, classes[C]["handler"], 1)
    return M1, dict(Pi)


def g_local(classes, M, Pi, r, choices):
    E, F, L, s, b = M[r]
    if b != 1:
        return None
    if Pi[r][2] != ():                        # premise: Pi(r).O = .
        return None
    stepped = step_local_oracle(classes, E, F, L, s, choices)
    if stepped is None:
        return None
    E1, F1, L1, s1 = stepped
    M1 = dict(M)
    M1[r] = (E1, F1, L1, s1, 1)
    return M1, dict(Pi)


def g_commit(classes, M, Pi, r):
    E, F, L, s, b = M[r]
    C, I, O, P, T = Pi[r]
    if s != SKIP or b != 1:
        return None
    if O != () or I == ():
        return None
    M1 = dict(M)
    M1[r] = ((), dict(F), dict(L), SKIP, 0)
    Pi1 = dict(Pi)
    Pi1[r] = (C, I[:-1], E, _persistent_of(classes, C, F), T)
    return M1, Pi1


def _reset_fields(classes, cname, P):
    F = dict(P)
    F.update(classes[cname]["volatile"])
    return F


def g_create(classes, tag_to_class, M, Pi, r):
    E, F, L, s, b = M[r]
    C, I, O, P, T = Pi[r]
    if s != SKIP or b != 0 or O == ():
        return None
    r1, tag, _ = O[-1]                        # pattern  _, (r1, n_C, _)
    if tag not in tag_to_class:
        return None
    new_c = tag_to_class[tag]
    Pi1 = dict(Pi)
    Pi1[r] = (C, I, O[:-1], P, ((r1, tag, 0),) + T)
    new_p = dict(classes[new_c]["persistent"])
    Pi1[r1] = (new_c, (), (), new_p, ())
    M1 = dict(M)
    M1[r1] = ((), _reset_fields(classes, new_c, new_p), {}, SKIP, 0)
    return M1, Pi1


def g_send(classes, tag_to_class, M, Pi, r):
    E, F, L, s, b = M[r]
    C, I, O, P, T = Pi[r]
    if s != SKIP or b != 0 or O == ():
        return None
    r1, n_e, n_p = O[-1]                      # pattern  _, (r1, n_e, n_p)
    if n_e in tag_to_class or r1 not in Pi:
        return None
    C1, I1, O1, P1, T1 = Pi[r1]
    Pi1 = dict(Pi)
    Pi1[r] = (C, I, O[:-1], P, ((r1, n_e, n_p),) + T)
    Pi1[r1] = (C1, ((r, n_e, n_p),) + I1, O1, P1, T1)
    return dict(M), Pi1


def g_reset(classes, M, Pi, r):
    C, I, O, P, T = Pi[r]
    M1 = dict(M)
    M1[r] = ((), _reset_fields(classes, C, P), {}, SKIP, 0)
    return M1, dict(Pi)
