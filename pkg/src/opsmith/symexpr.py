"""Symbolic sizes and integer coordinate expressions.

Sizes are monomials over named variables.  Variables come in two kinds:
primaries (tensor extents fixed by the problem, which must never end up
in a denominator) and coefficients (free tuning knobs, which may carry
negative exponents).  There is deliberately no integer factor: a size
like ``H*s^-1`` is legal, ``3*H`` is not.

Coordinate expressions are small integer ASTs over iterators, integer
constants and size references.  Floor division rounds toward negative
infinity and the remainder is always in ``[0, divisor)`` for a positive
divisor, matching Python semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union


class NonIntegralSize(Exception):
    """A size expression did not evaluate to a positive whole number."""


class OutOfDomain(Exception):
    """An iterator was bound to a value outside its declared range."""


@dataclass(frozen=True, order=True)
class Variable:
    name: str
    primary: bool = True


@dataclass(frozen=True)
class SymbolicSize:
    """A product of variable powers, kept sorted by variable name.

    The empty product is the size 1.  Exponents are nonzero, and
    primary variables never have a negative exponent; violating either
    invariant raises at construction time.  Use :func:`size_from_powers`
    to build one from unnormalized data.
    """

    powers: tuple[tuple[Variable, int], ...] = ()

    def __post_init__(self) -> None:
        names = [v.name for v, _ in self.powers]
        if names != sorted(names) or len(set(names)) != len(names):
            raise ValueError(f"powers not sorted by variable name: {names}")
        for var, exp in self.powers:
            if exp == 0:
                raise ValueError(f"zero exponent for {var.name}")
            if var.primary and exp < 0:
                raise ValueError(f"primary {var.name} with negative exponent {exp}")

    def __str__(self) -> str:
        if not self.powers:
            return "1"
        parts = []
        for var, exp in self.powers:
            parts.append(var.name if exp == 1 else f"{var.name}^{exp}")
        return "*".join(parts)

    def __mul__(self, other: "SymbolicSize") -> "SymbolicSize":
        return size_mul(self, other)


ONE = SymbolicSize()


def size_from_powers(powers: Mapping[Variable, int]) -> SymbolicSize:
    """Normalize an exponent map into a SymbolicSize (drops zeros, sorts)."""
    items = tuple(sorted(
        ((v, e) for v, e in powers.items() if e != 0),
        key=lambda it: it[0].name,
    ))
    return SymbolicSize(items)


def size_mul(a: SymbolicSize, b: SymbolicSize) -> SymbolicSize:
    acc: dict[Variable, int] = dict(a.powers)
    for var, exp in b.powers:
        acc[var] = acc.get(var, 0) + exp
    return size_from_powers(acc)


def size_div(a: SymbolicSize, b: SymbolicSize) -> Optional[SymbolicSize]:
    """a / b as a size, or None if a primary would go negative."""
    acc: dict[Variable, int] = dict(a.powers)
    for var, exp in b.powers:
        acc[var] = acc.get(var, 0) - exp
    if any(var.primary and e < 0 for var, e in acc.items()):
        return None
    return size_from_powers(acc)


def size_divides(a: SymbolicSize, b: SymbolicSize) -> bool:
    """True when b/a is still a well-formed size."""
    return size_div(b, a) is not None


def eval_size(size: SymbolicSize, assignment: Mapping[str, int]) -> int:
    """Evaluate under an assignment of variable names to ints >= 1.

    Raises NonIntegralSize when the negative exponents do not divide out
    evenly, and KeyError when a variable has no assigned value.
    """
    num = 1
    den = 1
    for var, exp in size.powers:
        val = assignment[var.name]
        if val < 1:
            raise ValueError(f"assignment for {var.name} must be >= 1, got {val}")
        if exp > 0:
            num *= val ** exp
        else:
            den *= val ** (-exp)
    if num % den != 0:
        raise NonIntegralSize(f"{size} is not integral under {dict(assignment)}")
    return num // den


def parse_size(text: str, variables: Mapping[str, Variable]) -> SymbolicSize:
    """Parse strings like "1", "H", "K^2", "H*s^-1"."""
    text = text.strip()
    if text == "1":
        return ONE
    acc: dict[Variable, int] = {}
    for factor in text.split("*"):
        factor = factor.strip()
        name, _, exp_text = factor.partition("^")
        name = name.strip()
        if name not in variables:
            raise ValueError(f"unknown size variable {name!r} in {text!r}")
        exp = int(exp_text) if exp_text else 1
        var = variables[name]
        acc[var] = acc.get(var, 0) + exp
    return size_from_powers(acc)


# ---------------------------------------------------------------------------
# Coordinate expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Iterator:
    """A loop variable ranging over [0, size)."""

    name: str
    size: SymbolicSize

    @property
    def domain(self) -> Optional[SymbolicSize]:
        return self.size


@dataclass(frozen=True)
class IntConst:
    value: int

    domain: Optional[SymbolicSize] = field(default=None, compare=False)


@dataclass(frozen=True)
class SizeRef:
    """A symbolic size used as an integer value inside an expression."""

    size: SymbolicSize

    domain: Optional[SymbolicSize] = field(default=None, compare=False)


@dataclass(frozen=True)
class Add:
    lhs: "CoordExpr"
    rhs: "CoordExpr"
    domain: Optional[SymbolicSize] = field(default=None, compare=False)


@dataclass(frozen=True)
class Sub:
    lhs: "CoordExpr"
    rhs: "CoordExpr"
    domain: Optional[SymbolicSize] = field(default=None, compare=False)


@dataclass(frozen=True)
class Mul:
    lhs: "CoordExpr"
    rhs: "CoordExpr"
    domain: Optional[SymbolicSize] = field(default=None, compare=False)


@dataclass(frozen=True)
class FloorDiv:
    lhs: "CoordExpr"
    rhs: "CoordExpr"
    domain: Optional[SymbolicSize] = field(default=None, compare=False)


@dataclass(frozen=True)
class Mod:
    lhs: "CoordExpr"
    rhs: "CoordExpr"
    domain: Optional[SymbolicSize] = field(default=None, compare=False)


CoordExpr = Union[Iterator, IntConst, SizeRef, Add, Sub, Mul, FloorDiv, Mod]

BINARY_TYPES = (Add, Sub, Mul, FloorDiv, Mod)


def eval_expr(
    expr: CoordExpr,
    iter_values: Mapping[str, int],
    assignment: Mapping[str, int],
) -> int:
    """Evaluate with concrete iterator values and a size assignment.

    The result may legitimately fall outside [0, domain); callers that
    index tensors decide whether that wraps, clips to zero, or is an
    error.  Binding an iterator outside its own range raises OutOfDomain.
    """
    match expr:
        case Iterator(name=name, size=size):
            val = iter_values[name]
            extent = eval_size(size, assignment)
            if not 0 <= val < extent:
                raise OutOfDomain(f"{name}={val} outside [0, {extent})")
            return val
        case IntConst(value=value):
            return value
        case SizeRef(size=size):
            return eval_size(size, assignment)
        case Add(lhs=a, rhs=b):
            return eval_expr(a, iter_values, assignment) + eval_expr(b, iter_values, assignment)
        case Sub(lhs=a, rhs=b):
            return eval_expr(a, iter_values, assignment) - eval_expr(b, iter_values, assignment)
        case Mul(lhs=a, rhs=b):
            return eval_expr(a, iter_values, assignment) * eval_expr(b, iter_values, assignment)
        case FloorDiv(lhs=a, rhs=b):
            return eval_expr(a, iter_values, assignment) // eval_expr(b, iter_values, assignment)
        case Mod(lhs=a, rhs=b):
            return eval_expr(a, iter_values, assignment) % eval_expr(b, iter_values, assignment)
    raise TypeError(f"not a coordinate expression: {expr!r}")


def free_iterators(expr: CoordExpr) -> dict[str, Iterator]:
    """All iterators in the expression, keyed by name, in traversal order."""
    found: dict[str, Iterator] = {}

    def walk(e: CoordExpr) -> None:
        match e:
            case Iterator(name=name):
                found.setdefault(name, e)
            case Add() | Sub() | Mul() | FloorDiv() | Mod():
                walk(e.lhs)
                walk(e.rhs)
            case _:
                pass

    walk(expr)
    return found


def subexpr_nodes(expr: CoordExpr) -> Iterable[CoordExpr]:
    """Yield every node of the expression tree, preorder."""
    yield expr
    if isinstance(expr, BINARY_TYPES):
        yield from subexpr_nodes(expr.lhs)
        yield from subexpr_nodes(expr.rhs)


def in_range_certain(expr: CoordExpr) -> bool:
    """Structural proof that the value always lies in [0, domain).

    Deliberately conservative: subtraction (and anything else that can
    go negative or overshoot) reports False.
    """
    match expr:
        case Iterator():
            return True
        case Mod(rhs=SizeRef()):
            return True
        case FloorDiv(lhs=a, rhs=SizeRef()):
            return in_range_certain(a)
        case Mul(lhs=SizeRef(), rhs=b):
            return in_range_certain(b)
        case Add(lhs=Mul(lhs=SizeRef(size=s), rhs=a), rhs=b):
            return bool(
                in_range_certain(a)
                and in_range_certain(b)
                and b.domain is not None
                and b.domain == s
            )
        case _:
            return False


def infer_domain(expr: CoordExpr) -> Optional[SymbolicSize]:
    """Best-effort domain for freshly built nodes (rewrites, parsing).

    Graph construction stamps exact domains; this reconstructs them
    where the structure allows and returns None otherwise.
    """
    match expr:
        case Iterator(size=size):
            return size
        case Mod(rhs=SizeRef(size=divisor)):
            return divisor
        case FloorDiv(lhs=a, rhs=SizeRef(size=divisor)):
            da = a.domain if a.domain is not None else infer_domain(a)
            if da is None:
                return None
            return size_div(da, divisor)
        case Mul(lhs=SizeRef(size=s), rhs=b):
            db = b.domain if b.domain is not None else infer_domain(b)
            if db is None:
                return None
            return size_mul(s, db)
        case Add(lhs=Mul(lhs=SizeRef(size=s), rhs=a), rhs=b):
            db = b.domain if b.domain is not None else infer_domain(b)
            da = a.domain if a.domain is not None else infer_domain(a)
            if da is not None and db == s:
                return size_mul(s, da)
            return None
        case _:
            return None


def with_domain(expr: CoordExpr, domain: Optional[SymbolicSize]) -> CoordExpr:
    """Copy of the node with its domain annotation replaced."""
    if isinstance(expr, Iterator) or domain is None:
        return expr
    match expr:
        case IntConst(value=v):
            return IntConst(v, domain=domain)
        case SizeRef(size=s):
            return SizeRef(s, domain=domain)
        case Add(lhs=a, rhs=b):
            return Add(a, b, domain=domain)
        case Sub(lhs=a, rhs=b):
            return Sub(a, b, domain=domain)
        case Mul(lhs=a, rhs=b):
            return Mul(a, b, domain=domain)
        case FloorDiv(lhs=a, rhs=b):
            return FloorDiv(a, b, domain=domain)
        case Mod(lhs=a, rhs=b):
            return Mod(a, b, domain=domain)
    raise TypeError(f"not a coordinate expression: {expr!r}")


# ---------------------------------------------------------------------------
# Rendering and parsing
# ---------------------------------------------------------------------------

_PREC_ADD = 1
_PREC_MUL = 2
_PREC_ATOM = 3


def _prec(expr: CoordExpr) -> int:
    match expr:
        case Add() | Sub():
            return _PREC_ADD
        case Mul() | FloorDiv() | Mod():
            return _PREC_MUL
        case SizeRef(size=s) if len(s.powers) > 1:
            return _PREC_MUL
        case _:
            return _PREC_ATOM


def render_expr(
    expr: CoordExpr,
    names: Optional[Mapping[str, str]] = None,
    spaced: bool = False,
) -> str:
    """Infix form, e.g. "(C*i0+r1)%(B*C)".

    ``spaced`` pads binary operators ("i0 + r1 - K / 2") for the
    loop-nest emitter; the tokenizer ignores the padding on the way
    back in.
    """
    pad = " " if spaced else ""

    def wrap(child: CoordExpr, min_prec: int) -> str:
        text = go(child)
        return f"({text})" if _prec(child) < min_prec else text

    def go(e: CoordExpr) -> str:
        match e:
            case Iterator(name=name):
                return names.get(name, name) if names else name
            case IntConst(value=v):
                return str(v)
            case SizeRef(size=s):
                return str(s)
            case Add(lhs=a, rhs=b):
                # right side gets parens at equal precedence so that the
                # left-associative parser reproduces the same tree
                return f"{wrap(a, _PREC_ADD)}{pad}+{pad}{wrap(b, _PREC_ADD + 1)}"
            case Sub(lhs=a, rhs=b):
                return f"{wrap(a, _PREC_ADD)}{pad}-{pad}{wrap(b, _PREC_ADD + 1)}"
            case Mul(lhs=a, rhs=b):
                return f"{wrap(a, _PREC_MUL)}{pad}*{pad}{wrap(b, _PREC_MUL + 1)}"
            case FloorDiv(lhs=a, rhs=b):
                return f"{wrap(a, _PREC_MUL)}{pad}/{pad}{wrap(b, _PREC_MUL + 1)}"
            case Mod(lhs=a, rhs=b):
                return f"{wrap(a, _PREC_MUL)}{pad}%{pad}{wrap(b, _PREC_MUL + 1)}"
        raise TypeError(f"not a coordinate expression: {e!r}")

    return go(expr)


class ExprParseError(ValueError):
    pass


def parse_expr(
    text: str,
    iterators: Mapping[str, Iterator],
    variables: Mapping[str, Variable],
) -> CoordExpr:
    """Inverse of render_expr for a known set of iterators and variables.

    Adjacent size factors multiply into a single size reference, so
    "B*C" parses to one SizeRef, matching how graphs build expressions.
    Domains are re-inferred, not parsed (they are not part of equality).
    """
    tokens = _tokenize(text)
    pos = 0

    def peek() -> Optional[str]:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise ExprParseError(f"unexpected end of input in {text!r}")
        tok = tokens[pos]
        pos += 1
        return tok

    def parse_atom() -> CoordExpr:
        tok = take()
        if tok == "(":
            inner = parse_sum()
            if take() != ")":
                raise ExprParseError(f"missing ')' in {text!r}")
            return inner
        if tok.lstrip("-").isdigit():
            return IntConst(int(tok))
        exp = 1
        if peek() == "^":
            take()
            exp = int(take())
        if tok in variables and exp != 1:
            return SizeRef(size_from_powers({variables[tok]: exp}))
        if tok in iterators:
            return iterators[tok]
        if tok in variables:
            return SizeRef(size_from_powers({variables[tok]: 1}))
        raise ExprParseError(f"unknown name {tok!r} in {text!r}")

    def parse_product() -> CoordExpr:
        node = parse_atom()
        while peek() in ("*", "/", "%"):
            op = take()
            rhs = parse_atom()
            if op == "*" and isinstance(node, SizeRef) and isinstance(rhs, SizeRef):
                node = SizeRef(size_mul(node.size, rhs.size))
            elif op == "*":
                node = Mul(node, rhs)
            elif op == "/":
                node = FloorDiv(node, rhs)
            else:
                node = Mod(node, rhs)
        return node

    def parse_sum() -> CoordExpr:
        node = parse_product()
        while peek() in ("+", "-"):
            op = take()
            rhs = parse_product()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    result = parse_sum()
    if pos != len(tokens):
        raise ExprParseError(f"trailing tokens {tokens[pos:]} in {text!r}")
    return _annotate(result)


def _annotate(expr: CoordExpr) -> CoordExpr:
    """Recursively stamp inferred domains onto a freshly parsed tree."""
    if isinstance(expr, BINARY_TYPES):
        expr = type(expr)(_annotate(expr.lhs), _annotate(expr.rhs))
    if isinstance(expr, Iterator) or expr.domain is not None:
        return expr
    return with_domain(expr, infer_domain(expr))


def _tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "+-*/%()^#":
            # a '-' directly after '^' starts a negative exponent literal
            if c == "-" and tokens and tokens[-1] == "^":
                j = i + 1
                while j < len(text) and text[j].isdigit():
                    j += 1
                tokens.append(text[i:j])
                i = j
            else:
                tokens.append(c)
                i += 1
        elif c.isalnum() or c == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(text[i:j])
            i = j
        else:
            raise ExprParseError(f"bad character {c!r} in {text!r}")
    return tokens
