"""Operator graphs built bottom-up from output coordinates.

A graph starts with one frontier dim per output axis, each carrying the
iterator for that axis.  Applying a primitive consumes frontier dims
and produces new ones whose expressions describe, in terms of output
and reduction iterators, which input coordinate each frontier position
reads.  When the frontier dims match the input shape one-to-one the
operator is complete: the access expressions plus the collected weight
tensors define output = sum over reduction iterators of
input[access] * product of weights[their accesses].

Primitives (consumed -> produced):

    reduce(N)    0 -> 1   fresh reduction iterator over [0, N)
    contract     k -> m   one weight tensor indexed by the targets'
                          expressions; targets marked "both" survive as
                          data copies, "weight" targets are consumed
    split        2 -> 1   (e1:[G], e2:[B]) -> B*e1+e2 : [G*B]
    merge(B)     1 -> 2   e:[N] -> (e/B : [N/B], e%B : [B])
    shift        1 -> 1   e:[N] -> (e+1)%N : [N]
    expand       1 -> 0   discards the dim; output is broadcast there
    unfold       2 -> 1   (e:[N], w:[K]) -> e+w-K/2 : [N], out of
                          bounds reads as zero
    stride(S)    1 -> 1   e:[K] -> S*e : [S*K], marked strided

A graph begins in its reduction stage: only reduce steps are proposed
until the stage is ended (explicitly via end_reductions, or implicitly
by applying any other primitive, so serialized operators replay
without an end marker).  A contraction may not directly follow another
contraction.  Strided dims are an intermediate state: they may only be
consumed as the data operand of an unfold and can never be matched to
an input dim.
"""

from __future__ import annotations

import functools
import itertools
import re
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

from .symexpr import (
    ONE,
    Add,
    CoordExpr,
    FloorDiv,
    IntConst,
    Iterator,
    Mod,
    Mul,
    NonIntegralSize,
    SizeRef,
    Sub,
    SymbolicSize,
    Variable,
    eval_size,
    free_iterators,
    parse_size,
    size_div,
    size_mul,
)


class GraphError(Exception):
    """Base for all graph construction failures."""


class ArityMismatch(GraphError):
    pass


class StageViolation(GraphError):
    pass


class DivisibilityViolation(GraphError):
    pass


class BudgetExceeded(GraphError):
    pass


KINDS = ("reduce", "contract", "split", "merge", "shift", "expand", "unfold", "stride")


@dataclass(frozen=True)
class Dim:
    ident: int
    size: SymbolicSize
    expr: CoordExpr
    origin: str            # kind of the step that produced it, or "root"
    origin_step: int       # index into steps, -1 for root dims
    origin_pos: int        # position among that step's produced dims
    strided: bool = False
    reduce_pure: bool = False  # every iterator in expr is a reduction iterator


@dataclass(frozen=True)
class Weight:
    sizes: tuple[SymbolicSize, ...]
    exprs: tuple[CoordExpr, ...]


@dataclass(frozen=True)
class Step:
    """A primitive application, by target dim idents.

    Proposals leave ``produced`` empty; the recorded history fills it
    in.  For split the coefficient (the second target's size) is
    recorded in ``param`` even though it is not a free choice.
    """

    kind: str
    targets: tuple[int, ...] = ()
    param: Optional[SymbolicSize] = None
    modes: tuple[str, ...] = ()   # contract only, parallel to targets
    produced: tuple[int, ...] = ()

    def signature(self) -> tuple:
        """Identity of the proposal, ignoring the produced record."""
        return (self.kind, self.targets, self.param, self.modes)


@dataclass(frozen=True)
class ProblemSpec:
    """What to synthesize an operator for.

    Primaries are the variables of the input/output shapes; the
    remaining variables are free coefficients the search may introduce,
    with reference values used for legality and budget checks.
    """

    name: str
    variables: tuple[Variable, ...]
    reference: tuple[tuple[str, int], ...]
    output_dims: tuple[SymbolicSize, ...]
    input_dims: tuple[SymbolicSize, ...]
    batch_dims: tuple[SymbolicSize, ...] = ()
    max_depth: int = 9
    flops_cap: Optional[int] = None
    params_cap: Optional[int] = None
    max_param_degree: int = 2
    max_expand: int = 2
    max_stride: int = 2

    @cached_property
    def assignment(self) -> dict[str, int]:
        return dict(self.reference)

    @cached_property
    def var_map(self) -> dict[str, Variable]:
        return {v.name: v for v in self.variables}

    def ref_eval(self, size: SymbolicSize) -> int:
        return eval_size(size, self.assignment)


@dataclass(frozen=True)
class PGraph:
    spec: ProblemSpec
    dims: tuple[Dim, ...]
    weights: tuple[Weight, ...] = ()
    steps: tuple[Step, ...] = ()
    in_reduction: bool = True
    after_contract: bool = False
    next_id: int = 0
    reduce_iters: tuple[Iterator, ...] = ()
    used_coeffs: frozenset = frozenset()

    @property
    def depth(self) -> int:
        return len(self.steps)

    def dim_by_ident(self, ident: int) -> Dim:
        for d in self.dims:
            if d.ident == ident:
                return d
        raise ArityMismatch(f"no frontier dim with ident {ident}")


def root(spec: ProblemSpec) -> PGraph:
    dims = tuple(
        Dim(
            ident=k,
            size=size,
            expr=Iterator(f"i{k}", size),
            origin="root",
            origin_step=-1,
            origin_pos=k,
        )
        for k, size in enumerate(spec.output_dims)
    )
    used = frozenset(
        v.name
        for size in spec.output_dims + spec.input_dims + spec.batch_dims
        for v, _ in size.powers
        if not v.primary
    )
    return PGraph(spec=spec, dims=dims, next_id=len(dims), used_coeffs=used)


def end_reductions(graph: PGraph) -> PGraph:
    """Leave the reduction stage without applying a primitive."""
    return replace(graph, in_reduction=False)


def spatial_iterators(spec: ProblemSpec) -> tuple[Iterator, ...]:
    return tuple(Iterator(f"i{k}", s) for k, s in enumerate(spec.output_dims))


# ---------------------------------------------------------------------------
# Applying a step
# ---------------------------------------------------------------------------

def _reduce_pure(expr: CoordExpr, reduce_names: frozenset) -> bool:
    names = set(free_iterators(expr))
    return bool(names) and names <= reduce_names


def apply(graph: PGraph, step: Step) -> PGraph:
    """Apply one primitive and return the successor graph.

    Raises a GraphError subclass when the step is malformed for this
    graph.  Legality beyond hard validity (degenerate parameters,
    inverse pairs, window bounds) lives in enumerate_children; apply
    deliberately accepts anything replayable so that serialized
    operators can be evaluated as given.
    """
    kind = step.kind
    if kind not in KINDS:
        raise GraphError(f"unknown primitive {kind!r}")
    if kind == "reduce":
        if not graph.in_reduction:
            raise StageViolation("reduce after the reduction stage ended")
        return _apply_reduce(graph, step)
    if kind == "contract" and graph.after_contract:
        raise StageViolation("contraction directly after a contraction")

    handler = {
        "contract": _apply_contract,
        "split": _apply_split,
        "merge": _apply_merge,
        "shift": _apply_shift,
        "expand": _apply_expand,
        "unfold": _apply_unfold,
        "stride": _apply_stride,
    }[kind]
    return handler(graph, step)


def _take_targets(graph: PGraph, step: Step, arity: int, strided_ok: tuple[bool, ...] = ()) -> list[Dim]:
    if len(step.targets) != arity:
        raise ArityMismatch(f"{step.kind} takes {arity} targets, got {len(step.targets)}")
    if len(set(step.targets)) != len(step.targets):
        raise ArityMismatch(f"{step.kind} targets repeat: {step.targets}")
    dims = [graph.dim_by_ident(t) for t in step.targets]
    if not strided_ok:
        strided_ok = (False,) * arity
    for d, ok in zip(dims, strided_ok):
        if d.strided and not ok:
            raise StageViolation(
                f"strided dim {d.ident} may only be the data operand of unfold"
            )
    return dims


def _reduce_names(graph: PGraph) -> frozenset:
    return frozenset(it.name for it in graph.reduce_iters)


def _advance(
    graph: PGraph,
    step: Step,
    consumed: list[Dim],
    produced_specs: list[tuple[SymbolicSize, CoordExpr, bool]],
    weights: Optional[tuple[Weight, ...]] = None,
    new_reduce: Optional[Iterator] = None,
) -> PGraph:
    """Common bookkeeping: record the step, splice the frontier."""
    step_index = len(graph.steps)
    reduce_iters = graph.reduce_iters + ((new_reduce,) if new_reduce else ())
    reduce_names = frozenset(it.name for it in reduce_iters)
    produced = []
    ident = graph.next_id
    for pos, (size, expr, strided) in enumerate(produced_specs):
        produced.append(
            Dim(
                ident=ident,
                size=size,
                expr=expr,
                origin=step.kind,
                origin_step=step_index,
                origin_pos=pos,
                strided=strided,
                reduce_pure=_reduce_pure(expr, reduce_names),
            )
        )
        ident += 1
    consumed_ids = {d.ident for d in consumed}
    dims = tuple(d for d in graph.dims if d.ident not in consumed_ids) + tuple(produced)
    recorded = Step(
        step.kind, step.targets, step.param, step.modes,
        tuple(d.ident for d in produced),
    )
    used = graph.used_coeffs
    if step.param is not None:
        used = used | {v.name for v, _ in step.param.powers if not v.primary}
    # Built directly rather than through dataclasses.replace: this is
    # the hottest allocation in the whole walk.
    return PGraph(
        spec=graph.spec,
        dims=dims,
        weights=graph.weights if weights is None else weights,
        steps=graph.steps + (recorded,),
        in_reduction=graph.in_reduction and step.kind == "reduce",
        after_contract=step.kind == "contract",
        next_id=ident,
        reduce_iters=reduce_iters,
        used_coeffs=used,
    )


def _apply_reduce(graph: PGraph, step: Step) -> PGraph:
    if step.param is None:
        raise GraphError("reduce needs a size parameter")
    if step.targets:
        raise ArityMismatch("reduce takes no targets")
    it = Iterator(f"r{len(graph.reduce_iters)}", step.param)
    return _advance(graph, step, [], [(step.param, it, False)], new_reduce=it)


def _apply_contract(graph: PGraph, step: Step) -> PGraph:
    if not step.targets:
        raise ArityMismatch("contract needs at least one target")
    if len(step.modes) != len(step.targets):
        raise ArityMismatch("contract needs one mode per target")
    if any(m not in ("both", "weight") for m in step.modes):
        raise GraphError(f"bad contract modes {step.modes}")
    dims = _take_targets(graph, step, len(step.targets))
    weight = Weight(
        sizes=tuple(d.size for d in dims),
        exprs=tuple(d.expr for d in dims),
    )
    produced = [
        (d.size, d.expr, False)
        for d, m in zip(dims, step.modes)
        if m == "both"
    ]
    return _advance(graph, step, dims, produced, weights=graph.weights + (weight,))


def _apply_split(graph: PGraph, step: Step) -> PGraph:
    hi, lo = _take_targets(graph, step, 2)
    coeff = lo.size
    expr = Add(Mul(SizeRef(coeff), hi.expr), lo.expr, domain=size_mul(hi.size, coeff))
    if step.param is not None and step.param != coeff:
        raise GraphError(f"split coefficient mismatch: {step.param} vs {coeff}")
    step = replace(step, param=coeff)
    return _advance(graph, step, [hi, lo], [(size_mul(hi.size, coeff), expr, False)])


def _apply_merge(graph: PGraph, step: Step) -> PGraph:
    (dim,) = _take_targets(graph, step, 1)
    if step.param is None:
        raise GraphError("merge needs a size parameter")
    quot_size = size_div(dim.size, step.param)
    if quot_size is None:
        raise DivisibilityViolation(f"{step.param} does not divide {dim.size}")
    quot = FloorDiv(dim.expr, SizeRef(step.param), domain=quot_size)
    rem = Mod(dim.expr, SizeRef(step.param), domain=step.param)
    return _advance(
        graph, step, [dim], [(quot_size, quot, False), (step.param, rem, False)]
    )


def _apply_shift(graph: PGraph, step: Step) -> PGraph:
    (dim,) = _take_targets(graph, step, 1)
    expr = Mod(Add(dim.expr, IntConst(1)), SizeRef(dim.size), domain=dim.size)
    return _advance(graph, step, [dim], [(dim.size, expr, False)])


def _apply_expand(graph: PGraph, step: Step) -> PGraph:
    (dim,) = _take_targets(graph, step, 1)
    return _advance(graph, step, [dim], [])


def _apply_unfold(graph: PGraph, step: Step) -> PGraph:
    data, window = _take_targets(graph, step, 2, strided_ok=(True, False))
    offset = FloorDiv(SizeRef(window.size), IntConst(2))
    expr = Sub(Add(data.expr, window.expr), offset, domain=data.size)
    return _advance(graph, step, [data, window], [(data.size, expr, False)])


def _apply_stride(graph: PGraph, step: Step) -> PGraph:
    (dim,) = _take_targets(graph, step, 1)
    if step.param is None:
        raise GraphError("stride needs a size parameter")
    size = size_mul(step.param, dim.size)
    expr = Mul(SizeRef(step.param), dim.expr, domain=size)
    return _advance(graph, step, [dim], [(size, expr, True)])


# ---------------------------------------------------------------------------
# Completion test
# ---------------------------------------------------------------------------

def numel(dims) -> SymbolicSize:
    """Product of the sizes of a dim (or size) sequence."""
    total = ONE
    for d in dims:
        total = size_mul(total, d.size if isinstance(d, Dim) else d)
    return total


def match_input(graph: PGraph) -> Optional[tuple[int, ...]]:
    """Greedy stable matching of frontier dims onto the input shape.

    Returns p with input axis i served by frontier dim p[i], or None.
    Every frontier dim must be used and strided dims never match.
    """
    dims = graph.dims
    if len(dims) != len(graph.spec.input_dims):
        return None
    if any(d.strided for d in dims):
        return None
    used = set()
    perm = []
    for size in graph.spec.input_dims:
        for k, d in enumerate(dims):
            if k not in used and d.size == size:
                used.add(k)
                perm.append(k)
                break
        else:
            return None
    return tuple(perm)


# ---------------------------------------------------------------------------
# Legal move enumeration
# ---------------------------------------------------------------------------

def _spec_memo(spec: ProblemSpec, slot: str) -> dict:
    """A lazily created per-spec cache dict.

    Specs are frozen but carry a ``__dict__``; parking the memo there
    keys the hot caches by identity instead of rehashing the whole spec
    on every probe.
    """
    memo = spec.__dict__.get(slot)
    if memo is None:
        memo = {}
        object.__setattr__(spec, slot, memo)
    return memo


def _param_pool(spec: ProblemSpec, used_coeffs: frozenset) -> tuple[SymbolicSize, ...]:
    """Sizes a step may introduce: monomials over the primaries, the
    coefficients already in play, and the first fresh coefficient.

    Degenerate sizes (reference value below 2) are excluded.
    """
    memo = _spec_memo(spec, "_pool_memo")
    cached = memo.get(used_coeffs)
    if cached is not None:
        return cached
    pool_vars = [v for v in spec.variables if v.primary or v.name in used_coeffs]
    for v in spec.variables:
        if not v.primary and v.name not in used_coeffs:
            pool_vars.append(v)
            break
    seen = {}
    for degree in range(1, spec.max_param_degree + 1):
        for combo in itertools.combinations_with_replacement(pool_vars, degree):
            powers: dict[Variable, int] = {}
            for v in combo:
                powers[v] = powers.get(v, 0) + 1
            if any(e > 2 for e in powers.values()):
                continue
            size = SymbolicSize(tuple(sorted(powers.items(), key=lambda p: p[0].name)))
            if str(size) in seen:
                continue
            if spec.ref_eval(size) >= 2:
                seen[str(size)] = size
    pool = tuple(seen[k] for k in sorted(seen))
    memo[used_coeffs] = pool
    return pool


def param_pool(graph: PGraph) -> tuple[SymbolicSize, ...]:
    return _param_pool(graph.spec, graph.used_coeffs)


def _merge_params(
    spec: ProblemSpec, used_coeffs: frozenset, size: SymbolicSize
) -> tuple[SymbolicSize, ...]:
    """Pool params that divide ``size`` with a non-degenerate quotient.

    Graph-independent, so cached; the split-inverse exclusion still
    happens per graph.
    """
    memo = _spec_memo(spec, "_merge_memo")
    key = (used_coeffs, size)
    cached = memo.get(key)
    if cached is not None:
        return cached
    out = []
    for p in _param_pool(spec, used_coeffs):
        if p == size:
            continue
        quot = size_div(size, p)
        if quot is None:
            continue
        try:
            if spec.ref_eval(quot) < 2:
                continue
        except NonIntegralSize:
            continue
        out.append(p)
    result = tuple(out)
    memo[key] = result
    return result


def _is_merge_inverse(graph: PGraph, hi: Dim, lo: Dim) -> bool:
    """Would split(hi, lo) exactly undo the merge that made them?"""
    return (
        hi.origin == "merge"
        and lo.origin == "merge"
        and hi.origin_step == lo.origin_step
        and hi.origin_pos == 0
        and lo.origin_pos == 1
    )


def _is_split_inverse(graph: PGraph, dim: Dim, param: SymbolicSize) -> bool:
    """Would merge(param) exactly undo the split that made this dim?"""
    if dim.origin != "split":
        return False
    return graph.steps[dim.origin_step].param == param


def enumerate_children(graph: PGraph) -> list[Step]:
    """Legal next steps, in a deterministic order.

    During the reduction stage only reduce steps appear, with
    parameters in non-decreasing text order so that permutations of
    the same reduction multiset are proposed once.  Canonical-form
    checking is a separate, later judgment.
    """
    pool = param_pool(graph)
    ref = graph.spec.ref_eval

    if graph.in_reduction:
        floor = ""
        if graph.steps:
            floor = str(graph.steps[-1].param)
        return [
            Step("reduce", (), p) for p in pool if str(p) >= floor
        ]

    steps: list[Step] = []
    frontier = graph.dims
    normal = [d for d in frontier if not d.strided]

    if not graph.after_contract:
        for count in range(1, len(normal) + 1):
            for subset in itertools.combinations(normal, count):
                modes = tuple(
                    "both" if d.reduce_pure else "weight" for d in subset
                )
                steps.append(
                    Step("contract", tuple(d.ident for d in subset), modes=modes)
                )

    for hi in normal:
        for lo in normal:
            if hi.ident == lo.ident or _is_merge_inverse(graph, hi, lo):
                continue
            steps.append(Step("split", (hi.ident, lo.ident)))

    for d in normal:
        for p in _merge_params(graph.spec, graph.used_coeffs, d.size):
            if _is_split_inverse(graph, d, p):
                continue
            steps.append(Step("merge", (d.ident,), p))

    for d in normal:
        steps.append(Step("shift", (d.ident,)))

    if sum(1 for s in graph.steps if s.kind == "expand") < graph.spec.max_expand:
        for d in normal:
            steps.append(Step("expand", (d.ident,)))

    refs = {d.ident: ref(d.size) for d in frontier}
    for data in frontier:
        for window in normal:
            if window.ident == data.ident:
                continue
            if refs[window.ident] > refs[data.ident]:
                continue
            steps.append(Step("unfold", (data.ident, window.ident)))

    if sum(1 for s in graph.steps if s.kind == "stride") < graph.spec.max_stride:
        for d in normal:
            for p in pool:
                steps.append(Step("stride", (d.ident,), p))

    return steps


# ---------------------------------------------------------------------------
# Budgets and counts
# ---------------------------------------------------------------------------

def weight_count(graph: PGraph, assignment: Optional[dict] = None) -> int:
    """Total number of weight elements under an assignment."""
    env = assignment if assignment is not None else graph.spec.assignment
    total = 0
    for w in graph.weights:
        n = 1
        for s in w.sizes:
            n *= eval_size(s, env)
        total += n
    return total


def check_budgets(graph: PGraph, flops: Optional[int] = None) -> None:
    """Raise BudgetExceeded if the reference-assignment budgets fail."""
    spec = graph.spec
    if spec.params_cap is not None and weight_count(graph) > spec.params_cap:
        raise BudgetExceeded(
            f"{weight_count(graph)} weight elements over cap {spec.params_cap}"
        )
    if spec.flops_cap is not None and flops is not None and flops > spec.flops_cap:
        raise BudgetExceeded(f"{flops} flops over cap {spec.flops_cap}")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
# Two text forms.  The compact step string op{...} names only the
# primitive sequence and is the unit search logs carry.  The operator
# document wraps it with everything needed to replay it standalone:
# variable declarations with reference values, the output/input/batch
# shapes, and the finalization permutation when the operator is
# complete.  parse(print(g)) reproduces both forms exactly.

_STEP_RE = re.compile(r"^(?P<kind>[a-z]+)(?:\((?P<param>[^)]*)\))?(?:\[(?P<targets>[^\]]*)\])?$")


class OperatorParseError(ValueError):
    pass


def print_steps(graph: PGraph) -> str:
    parts = []
    for st in graph.steps:
        if st.kind == "reduce":
            parts.append(f"reduce({st.param})")
        elif st.kind == "contract":
            body = ",".join(f"{t}:{m}" for t, m in zip(st.targets, st.modes))
            parts.append(f"contract[{body}]")
        elif st.kind in ("merge", "stride"):
            parts.append(f"{st.kind}({st.param})[{st.targets[0]}]")
        else:
            body = ",".join(str(t) for t in st.targets)
            parts.append(f"{st.kind}[{body}]")
    return "op{" + "; ".join(parts) + "}"


def parse_steps(text: str, spec: ProblemSpec) -> PGraph:
    """Rebuild a graph by replaying a step string against a spec."""
    text = text.strip()
    if not (text.startswith("op{") and text.endswith("}")):
        raise OperatorParseError(f"expected op{{...}}, got {text[:40]!r}")
    body = text[3:-1].strip()
    graph = root(spec)
    if not body:
        return graph
    for part in body.split(";"):
        part = part.strip()
        m = _STEP_RE.match(part)
        if m is None:
            raise OperatorParseError(f"bad step {part!r}")
        kind = m.group("kind")
        param = None
        if m.group("param"):
            param = parse_size(m.group("param"), spec.var_map)
        targets: tuple[int, ...] = ()
        modes: tuple[str, ...] = ()
        if m.group("targets"):
            items = [t.strip() for t in m.group("targets").split(",")]
            if kind == "contract":
                pairs = [t.split(":") for t in items]
                if any(len(p) != 2 for p in pairs):
                    raise OperatorParseError(f"bad contract targets {part!r}")
                targets = tuple(int(p[0]) for p in pairs)
                modes = tuple(p[1] for p in pairs)
            else:
                targets = tuple(int(t) for t in items)
        try:
            graph = apply(graph, Step(kind, targets, param, modes))
        except GraphError as err:
            raise OperatorParseError(f"cannot replay {part!r}: {err}") from err
    return graph


def print_operator(graph: PGraph) -> str:
    spec = graph.spec
    ref = spec.assignment
    lines = [f"operator {spec.name}"]
    for v in spec.variables:
        kind = "primary" if v.primary else "coefficient"
        lines.append(f"var {v.name} {kind} {ref[v.name]}")
    lines.append("output " + " ".join(str(s) for s in spec.output_dims))
    lines.append("input " + " ".join(str(s) for s in spec.input_dims))
    if spec.batch_dims:
        lines.append("batch " + " ".join(str(s) for s in spec.batch_dims))
    lines.append("steps " + print_steps(graph))
    perm = match_input(graph)
    if perm is not None:
        lines.append("perm " + " ".join(str(p) for p in perm))
    return "\n".join(lines) + "\n"


def parse_operator(text: str) -> PGraph:
    """Parse a standalone operator document.

    Budgets and search settings are not part of the document; the
    embedded spec gets the defaults.
    """
    name = None
    variables: list[Variable] = []
    reference: list[tuple[str, int]] = []
    shapes: dict[str, str] = {}
    steps_text = None
    perm_text = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, rest = line.partition(" ")
        if head == "operator":
            name = rest.strip()
        elif head == "var":
            fields = rest.split()
            if len(fields) != 3 or fields[1] not in ("primary", "coefficient"):
                raise OperatorParseError(f"bad variable line {line!r}")
            variables.append(Variable(fields[0], fields[1] == "primary"))
            try:
                reference.append((fields[0], int(fields[2])))
            except ValueError:
                raise OperatorParseError(f"bad reference value in {line!r}") from None
        elif head in ("output", "input", "batch"):
            shapes[head] = rest
        elif head == "steps":
            steps_text = rest.strip()
        elif head == "perm":
            perm_text = rest
        else:
            raise OperatorParseError(f"unknown line {line!r}")
    if name is None or steps_text is None:
        raise OperatorParseError("document needs operator and steps lines")
    if "output" not in shapes or "input" not in shapes:
        raise OperatorParseError("document needs output and input lines")
    var_map = {v.name: v for v in variables}

    def shape(key: str) -> tuple[SymbolicSize, ...]:
        if key not in shapes:
            return ()
        return tuple(parse_size(tok, var_map) for tok in shapes[key].split())

    spec = ProblemSpec(
        name=name,
        variables=tuple(variables),
        reference=tuple(reference),
        output_dims=shape("output"),
        input_dims=shape("input"),
        batch_dims=shape("batch"),
    )
    graph = parse_steps(steps_text, spec)
    if perm_text is not None:
        perm = tuple(int(t) for t in perm_text.split())
        if match_input(graph) != perm:
            raise OperatorParseError(f"document permutation {perm} does not match")
    return graph
