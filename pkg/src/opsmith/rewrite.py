"""Pattern rewriting over coordinate expressions.

Rules are written in a small text form, one per line:

    name: pattern => rewrite [if guard and guard ...]

``#0``, ``#1``, ... are wildcards that match any subexpression (a
repeated wildcard must match structurally equal ones).  Free names are
size symbols: they match a whole size reference, and inside a product
like ``A*B`` an unbound symbol is solved by monomial division.  A rule
whose name is prefixed with ``approx`` does not preserve values and is
only ever used to judge canonical form, never to transform.

Pair rules rewrite two expressions of an entry list together:

    name: [P1, P2] => [R1, R2] if guard

Guards: ``divides(x, y)`` (x divides y under every assignment),
``sizedivides(x, y)`` (y/x is merely a legal size), ``x == y``,
``coeffonly(x)``, ``hasprimary(x)``, ``inrange(#k)``; operands are
products of size symbols and ``dom(#k)`` references.

Every exact rule strictly decreases the lexicographic measure
(div/mod count, weighted add/sub depth, divisor degree, node count),
so simplification to a fixpoint terminates; tests/test_rewrite.py
checks the decrease property on random expressions.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .symexpr import (
    ONE,
    Add,
    BINARY_TYPES,
    CoordExpr,
    FloorDiv,
    IntConst,
    Mod,
    Mul,
    SizeRef,
    Sub,
    SymbolicSize,
    in_range_certain,
    infer_domain,
    size_div,
    size_mul,
    with_domain,
    _tokenize,
)


# ---------------------------------------------------------------------------
# Pattern AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Wild:
    index: int


@dataclass(frozen=True)
class SizeSym:
    """A product of size symbols matching a single size reference."""

    names: tuple[str, ...]


@dataclass(frozen=True)
class IntPat:
    value: int


@dataclass(frozen=True)
class BinPat:
    op: str  # one of + - * / %
    lhs: "Pattern"
    rhs: "Pattern"


Pattern = Union[Wild, SizeSym, IntPat, BinPat]

_BIN_CLS = {"+": Add, "-": Sub, "*": Mul, "/": FloorDiv, "%": Mod}
_COMMUTATIVE = {"+", "*"}


# Guards are small tuples:
#   ("divides", t1, t2) ("eq", t1, t2) ("coeffonly", t) ("hasprimary", t)
#   ("inrange", k)
# where a size term t is a tuple of atoms, each atom a symbol name or
# ("dom", k).
SizeTerm = tuple
Guard = tuple


@dataclass(frozen=True)
class Rule:
    rule_id: str
    patterns: tuple[Pattern, ...]
    rewrites: tuple[Pattern, ...]
    guards: tuple[Guard, ...]
    approx: bool = False

    @property
    def paired(self) -> bool:
        return len(self.patterns) == 2


# ---------------------------------------------------------------------------
# Rule text parsing
# ---------------------------------------------------------------------------

class RuleParseError(ValueError):
    pass


def _parse_pattern(tokens: list[str], pos: int) -> tuple[Pattern, int]:
    def atom(pos: int) -> tuple[Pattern, int]:
        if pos >= len(tokens):
            raise RuleParseError("unexpected end of pattern")
        tok = tokens[pos]
        if tok == "(":
            node, pos = psum(pos + 1)
            if pos >= len(tokens) or tokens[pos] != ")":
                raise RuleParseError("missing ')'")
            return node, pos + 1
        if tok == "#":
            idx = int(tokens[pos + 1])
            return Wild(idx), pos + 2
        if tok.isdigit():
            return IntPat(int(tok)), pos + 1
        if tok.isidentifier():
            return SizeSym((tok,)), pos + 1
        raise RuleParseError(f"bad pattern token {tok!r}")

    def product(pos: int) -> tuple[Pattern, int]:
        node, pos = atom(pos)
        while pos < len(tokens) and tokens[pos] in ("*", "/", "%"):
            op = tokens[pos]
            rhs, pos = atom(pos + 1)
            if op == "*" and isinstance(node, SizeSym) and isinstance(rhs, SizeSym):
                node = SizeSym(node.names + rhs.names)
            else:
                node = BinPat(op, node, rhs)
        return node, pos

    def psum(pos: int) -> tuple[Pattern, int]:
        node, pos = product(pos)
        while pos < len(tokens) and tokens[pos] in ("+", "-"):
            op = tokens[pos]
            rhs, pos = product(pos + 1)
            node = BinPat(op, node, rhs)
        return node, pos

    return psum(pos)


def _parse_pattern_list(text: str) -> tuple[Pattern, ...]:
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise RuleParseError(f"unclosed pattern list: {text!r}")
        parts = _split_top_commas(text[1:-1])
        return tuple(_parse_one(p) for p in parts)
    return (_parse_one(text),)


def _split_top_commas(text: str) -> list[str]:
    parts, depth, start = [], 0, 0
    for i, c in enumerate(text):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        elif c == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    return parts


def _parse_one(text: str) -> Pattern:
    tokens = _tokenize(text)
    node, pos = _parse_pattern(tokens, 0)
    if pos != len(tokens):
        raise RuleParseError(f"trailing tokens in pattern {text!r}")
    return node


def _parse_size_term(text: str) -> SizeTerm:
    atoms = []
    for piece in text.split("*"):
        piece = piece.strip()
        if piece.startswith("dom(") and piece.endswith(")"):
            inner = piece[4:-1].strip()
            if not inner.startswith("#"):
                raise RuleParseError(f"dom() expects a wildcard, got {inner!r}")
            atoms.append(("dom", int(inner[1:])))
        elif piece.isidentifier():
            atoms.append(piece)
        else:
            raise RuleParseError(f"bad size term {piece!r}")
    return tuple(atoms)


def _parse_guard(text: str) -> Guard:
    text = text.strip()
    if "==" in text:
        a, b = text.split("==")
        return ("eq", _parse_size_term(a), _parse_size_term(b))
    for fn in ("divides", "sizedivides", "coeffonly", "hasprimary", "inrange"):
        if text.startswith(fn + "(") and text.endswith(")"):
            inner = text[len(fn) + 1:-1]
            if fn in ("divides", "sizedivides"):
                a, b = _split_top_commas(inner)
                return (fn, _parse_size_term(a), _parse_size_term(b))
            if fn == "inrange":
                inner = inner.strip()
                if not inner.startswith("#"):
                    raise RuleParseError(f"inrange() expects a wildcard, got {inner!r}")
                return ("inrange", int(inner[1:]))
            return (fn, _parse_size_term(inner))
    raise RuleParseError(f"bad guard {text!r}")


def parse_rules(text: str) -> list[Rule]:
    rules = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        approx = False
        if line.startswith("approx "):
            approx = True
            line = line[len("approx "):]
        name, sep, body = line.partition(":")
        if not sep or not name.strip().replace("-", "").isalnum():
            raise RuleParseError(f"rule needs a 'name:' label: {raw!r}")
        lhs_text, sep, rest = body.partition("=>")
        if not sep:
            raise RuleParseError(f"rule needs '=>': {raw!r}")
        rhs_text, _, guard_text = rest.partition(" if ")
        patterns = _parse_pattern_list(lhs_text)
        rewrites = _parse_pattern_list(rhs_text)
        if len(patterns) != len(rewrites) or len(patterns) not in (1, 2):
            raise RuleParseError(f"pattern/rewrite arity mismatch: {raw!r}")
        guards = tuple(
            _parse_guard(g) for g in guard_text.split(" and ") if g.strip()
        ) if guard_text else ()
        rules.append(Rule(name.strip(), patterns, rewrites, guards, approx))
    return rules


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

Bindings = dict  # int -> CoordExpr, str -> SymbolicSize


def _match(pat: Pattern, expr: CoordExpr, bindings: Bindings) -> Optional[Bindings]:
    match pat:
        case Wild(index=i):
            if i in bindings:
                return bindings if bindings[i] == expr else None
            out = dict(bindings)
            out[i] = expr
            return out
        case IntPat(value=v):
            if isinstance(expr, IntConst) and expr.value == v:
                return bindings
            # multiplying or dividing by the size 1 is the same as by
            # the literal 1
            if v == 1 and isinstance(expr, SizeRef) and expr.size == ONE:
                return bindings
            return None
        case SizeSym(names=names):
            if not isinstance(expr, SizeRef):
                return None
            return _solve_size(names, expr.size, bindings)
        case BinPat(op=op, lhs=pl, rhs=pr):
            cls = _BIN_CLS[op]
            if not isinstance(expr, cls):
                return None
            b = _match(pl, expr.lhs, bindings)
            if b is not None:
                b2 = _match(pr, expr.rhs, b)
                if b2 is not None:
                    return b2
            if op in _COMMUTATIVE:
                b = _match(pl, expr.rhs, bindings)
                if b is not None:
                    b2 = _match(pr, expr.lhs, b)
                    if b2 is not None:
                        return b2
            return None
    raise TypeError(f"not a pattern: {pat!r}")


def _solve_size(names: tuple[str, ...], size: SymbolicSize, bindings: Bindings) -> Optional[Bindings]:
    """Match a product of symbols against one size by monomial division."""
    rem = size
    unbound = []
    for name in names:
        if name in bindings:
            quo = size_div(rem, bindings[name])
            if quo is None:
                return None
            rem = quo
        else:
            unbound.append(name)
    if not unbound:
        return bindings if rem == ONE else None
    if len(unbound) == 1:
        # a symbol solved by division must come out as a plain positive
        # monomial: binding B := B*C^-1 in (A*#0)/(A*B) would rewrite
        # to a division by a fractional amount, which is not the same
        # value (and may not even evaluate)
        if len(names) > 1 and any(e < 0 for _, e in rem.powers):
            return None
        out = dict(bindings)
        out[unbound[0]] = rem
        return out
    # two or more unknowns in one product is ambiguous; the default
    # rules never need it
    return None


def _eval_size_term(term: SizeTerm, bindings: Bindings) -> Optional[SymbolicSize]:
    acc = ONE
    for atom in term:
        if isinstance(atom, tuple):
            expr = bindings.get(atom[1])
            if expr is None:
                return None
            dom = expr.domain if expr.domain is not None else infer_domain(expr)
            if dom is None:
                return None
            acc = size_mul(acc, dom)
        else:
            val = bindings.get(atom)
            if val is None:
                return None
            acc = size_mul(acc, val)
    return acc


def _divides_always(a: SymbolicSize, b: SymbolicSize) -> bool:
    """a divides b under every assignment: b/a is a plain monomial.

    This is stricter than the type-level divisibility used elsewhere.
    A quotient with a negative coefficient exponent (B^-1, say) is a
    legal size but does not make a an integral divisor of b, and the
    rules guarded by divides() are only value-preserving when the
    divisibility is numeric.
    """
    quo = size_div(b, a)
    return quo is not None and all(e > 0 for _, e in quo.powers)


def _check_guard(guard: Guard, bindings: Bindings) -> bool:
    kind = guard[0]
    if kind == "inrange":
        expr = bindings.get(guard[1])
        return expr is not None and in_range_certain(expr)
    if kind in ("coeffonly", "hasprimary"):
        size = _eval_size_term(guard[1], bindings)
        if size is None:
            return False
        primaries = [v for v, _ in size.powers if v.primary]
        return bool(primaries) if kind == "hasprimary" else not primaries
    a = _eval_size_term(guard[1], bindings)
    b = _eval_size_term(guard[2], bindings)
    if a is None or b is None:
        return False
    if kind == "eq":
        return a == b
    if kind == "divides":
        return _divides_always(a, b)
    if kind == "sizedivides":
        # type-level only: is b/a a legal size at all
        return size_div(b, a) is not None
    raise ValueError(f"unknown guard {guard!r}")


def _instantiate(pat: Pattern, bindings: Bindings) -> CoordExpr:
    match pat:
        case Wild(index=i):
            return bindings[i]
        case IntPat(value=v):
            return IntConst(v)
        case SizeSym(names=names):
            acc = ONE
            for name in names:
                acc = size_mul(acc, bindings[name])
            return SizeRef(acc)
        case BinPat(op=op, lhs=pl, rhs=pr):
            node = _BIN_CLS[op](_instantiate(pl, bindings), _instantiate(pr, bindings))
            return with_domain(node, infer_domain(node))
    raise TypeError(f"not a pattern: {pat!r}")


# ---------------------------------------------------------------------------
# Rewriting driver
# ---------------------------------------------------------------------------

def _try_rule_here(rule: Rule, expr: CoordExpr) -> Optional[CoordExpr]:
    b = _match(rule.patterns[0], expr, {})
    if b is None:
        return None
    if not all(_check_guard(g, b) for g in rule.guards):
        return None
    return _instantiate(rule.rewrites[0], b)


def _rewrite_first(expr: CoordExpr, rules: Sequence[Rule]) -> Optional[tuple[CoordExpr, str]]:
    """Preorder first-match single-rule rewrite; None when nothing fires."""
    for rule in rules:
        if rule.paired:
            continue
        out = _try_rule_here(rule, expr)
        if out is not None:
            return out, rule.rule_id
    if isinstance(expr, BINARY_TYPES):
        sub = _rewrite_first(expr.lhs, rules)
        if sub is not None:
            node, rid = sub
            return type(expr)(node, expr.rhs, domain=expr.domain), rid
        sub = _rewrite_first(expr.rhs, rules)
        if sub is not None:
            node, rid = sub
            return type(expr)(expr.lhs, node, domain=expr.domain), rid
    return None


def _rewrite_pair_first(
    entries: list[CoordExpr], rules: Sequence[Rule]
) -> Optional[tuple[list[CoordExpr], str]]:
    """Pair rules match whole entries, over ordered index pairs."""
    for rule in rules:
        if not rule.paired:
            continue
        for i in range(len(entries)):
            for j in range(len(entries)):
                if i == j:
                    continue
                b = _match(rule.patterns[0], entries[i], {})
                if b is None:
                    continue
                b = _match(rule.patterns[1], entries[j], b)
                if b is None:
                    continue
                if not all(_check_guard(g, b) for g in rule.guards):
                    continue
                out = list(entries)
                out[i] = _instantiate(rule.rewrites[0], b)
                out[j] = _instantiate(rule.rewrites[1], b)
                return out, rule.rule_id
    return None


def simplify(
    entries: Sequence[CoordExpr],
    rules: Sequence[Rule],
    max_steps: int = 10_000,
) -> tuple[list[CoordExpr], list[str]]:
    """Rewrite the entry list to a fixpoint.

    Returns the simplified entries and the ids of the rules that fired,
    in firing order.  An empty second element means the entries were
    already in normal form, which is what canonical-form checking needs
    to know.
    """
    current = list(entries)
    fired: list[str] = []
    for _ in range(max_steps):
        advanced = False
        for i, e in enumerate(current):
            sub = _rewrite_first(e, rules)
            if sub is not None:
                current[i], rid = sub
                fired.append(rid)
                advanced = True
                break
        if advanced:
            continue
        pair = _rewrite_pair_first(current, rules)
        if pair is not None:
            current, rid = pair
            fired.append(rid)
            continue
        return current, fired
    raise RuntimeError(f"no fixpoint after {max_steps} rewrites: {entries!r}")


# ---------------------------------------------------------------------------
# Termination measure (exported for the property tests)
# ---------------------------------------------------------------------------

def measure(entries: Sequence[CoordExpr]) -> tuple[int, int, int, int]:
    """Lexicographic termination measure; every exact rule decreases it."""
    divmod_count = 0
    weighted_sums = 0
    divisor_degree = 0
    nodes = 0

    def walk(e: CoordExpr, muls_above: int) -> None:
        nonlocal divmod_count, weighted_sums, divisor_degree, nodes
        nodes += 1
        match e:
            case FloorDiv() | Mod():
                divmod_count += 1
                if isinstance(e.rhs, SizeRef):
                    divisor_degree += sum(abs(x) for _, x in e.rhs.size.powers)
                walk(e.lhs, muls_above + 1)
                walk(e.rhs, muls_above + 1)
            case Mul():
                walk(e.lhs, muls_above + 1)
                walk(e.rhs, muls_above + 1)
            case Add() | Sub():
                weighted_sums += 3 ** muls_above
                walk(e.lhs, muls_above)
                walk(e.rhs, muls_above)
            case _:
                pass

    for e in entries:
        walk(e, 0)
    return (divmod_count, weighted_sums, divisor_degree, nodes)


# ---------------------------------------------------------------------------
# Default rules
# ---------------------------------------------------------------------------

DEFAULT_RULE_TEXT = """
add-zero:        #0+0 => #0
sub-zero:        #0-0 => #0
mul-one:         1*#0 => #0
mul-zero:        #0*0 => 0
div-one:         #0/1 => #0
mod-one:         #0%1 => 0
div-zero:        0/A => 0
mod-zero:        0%A => 0
mul-assoc:       A*(B*#0) => (A*B)*#0
mul-distrib-add: A*(#0+#1) => A*#0+A*#1
mul-distrib-sub: A*(#0-#1) => A*#0-A*#1
div-div:         (#0/A)/B => #0/(A*B)
mod-mod-inner:   (#0%A)%B => #0%B if divides(B, A)
mod-mod-outer:   (#0%A)%B => #0%A if divides(A, B)
mul-div-cancel:  (A*#0)/A => #0
mul-mod-cancel:  (A*#0)%A => 0
strided-div:     (A*#0)/(A*B) => #0/B
strided-mod:     (A*#0)%(A*B) => A*(#0%B)
split-div-pass:  (A*#0+#1)/A => #0+#1/A
split-mod-pass:  (A*#0+#1)%A => #1%A
recompose:       A*(#0/A)+#0%A => #0
div-of-bounded:  #0/A => 0 if inrange(#0) and divides(dom(#0), A)
mod-of-bounded:  #0%A => #0 if inrange(#0) and divides(dom(#0), A)
split-merge-pair: [(A*#0+#1)/(B*A), (A*#0+#1)%(B*A)] => [#0/B, A*(#0%B)+#1] if inrange(#1) and A == dom(#1) and sizedivides(B, dom(#0))
approx offset-through-div: [(#0+#1-A/2)/B, (#0+#1-A/2)%B] => [#0/B+#1-A/2, #0%B+#1-A/2] if coeffonly(A) and coeffonly(dom(#1)) and hasprimary(B)
"""


@functools.lru_cache(maxsize=None)
def default_rules(include_approx: bool = True) -> tuple[Rule, ...]:
    rules = parse_rules(DEFAULT_RULE_TEXT)
    if not include_approx:
        rules = [r for r in rules if not r.approx]
    return tuple(rules)
