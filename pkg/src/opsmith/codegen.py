"""Reference interpreter and loop-nest lowering for operator graphs.

A complete graph describes one linear operator: every output element is
a sum over the reduction iterators of a product of accessed elements
(the input tensor and any contraction weights).  This module lowers a
graph to an explicit :class:`LoopNest`, runs the nest with numpy,
differentiates it with respect to the weights, counts FLOPs, and prints
it as nested-loop pseudocode.

Conventions shared with the docs and the CLI:

* All arithmetic is float64.  FLOPs are counted at 2 per
  multiply-accumulate, so a stage costs ``2 * prod(axis extents) *
  prod(reduction extents)``.
* Out-of-range accesses read zero.  That holds for the value and for
  the gradient: an element that was never read gets zero gradient.
* The interpreter is an einsum in disguise.  Each stage materializes
  an index grid (one numpy axis per loop), evaluates every access's
  coordinate expressions on the grid, multiplies the gathered values,
  and sums over the reduction axes.  The emitted pseudocode spells the
  same thing as loops.

Staging (``rfactor``) splits the sum when it pays.  A reduction can be
lowered into its own earlier stage when every access that mentions it
can be rewritten over that reduction plus placeholder coordinates for
its maximal reduction-free subexpressions.  Only the accesses that
reach the reduction move into the new stage; the remaining stage reads
the intermediate through the placeholder expressions.  Placeholder
extents come from interval analysis, not from the annotated domain, so
zero padding behaves the same staged and unstaged.  A factoring is
kept only when it strictly lowers the FLOP count, so staging never
makes an operator more expensive.

A loop nest is concrete: it is built under one size assignment (the
spec's reference values by default) and records integer extents next
to the symbolic sizes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .pgraph import PGraph, ProblemSpec, Step, apply, match_input, root, weight_count
from .symexpr import (
    ONE,
    Add,
    CoordExpr,
    FloorDiv,
    IntConst,
    Iterator,
    Mod,
    Mul,
    SizeRef,
    Sub,
    SymbolicSize,
    eval_size,
    free_iterators,
    parse_expr,
    parse_size,
    render_expr,
)


class ShapeMismatch(Exception):
    """An array does not have the shape the operator requires."""


class LoopNestParseError(ValueError):
    pass


SizeLike = Union[SymbolicSize, int]


def _extent(size: SizeLike, assignment: Mapping[str, int]) -> int:
    return size if isinstance(size, int) else eval_size(size, assignment)


def _size_str(size: SizeLike) -> str:
    return str(size)


# ---------------------------------------------------------------------------
# Loop-nest IR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    """One loop: ``for name in size`` with a concrete extent."""

    name: str
    size: SizeLike
    extent: int


@dataclass(frozen=True)
class Access:
    """A multiplicative term ``tensor[exprs...]``."""

    tensor: str
    exprs: tuple[CoordExpr, ...]


@dataclass(frozen=True)
class Stage:
    """One loop nest writing one tensor.

    ``axes`` are the parallel loops (the written tensor's shape),
    ``reduces`` the accumulation loops, ``terms`` the accesses whose
    product is accumulated.
    """

    tensor: str
    axes: tuple[Axis, ...]
    reduces: tuple[Axis, ...]
    terms: tuple[Access, ...]


@dataclass(frozen=True)
class TensorDecl:
    name: str
    role: str  # "input" | "weight" | "stage" | "output"
    sizes: tuple[SizeLike, ...]
    extents: tuple[int, ...]


@dataclass(frozen=True)
class LoopNest:
    name: str
    assignment: tuple[tuple[str, int], ...]
    tensors: tuple[TensorDecl, ...]
    stages: tuple[Stage, ...]

    @property
    def env(self) -> dict[str, int]:
        return dict(self.assignment)

    def tensor(self, name: str) -> TensorDecl:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Evaluating coordinate expressions on index grids
# ---------------------------------------------------------------------------

def _eval_array(expr: CoordExpr, env: Mapping[str, np.ndarray], sizes: Mapping[str, int]):
    """Evaluate an expression over broadcast index arrays.

    numpy's // and % agree with Python's floor-division semantics for
    the negative intermediates unfolds produce.
    """
    match expr:
        case Iterator(name=name):
            return env[name]
        case IntConst(value=v):
            return np.int64(v)
        case SizeRef(size=s):
            return np.int64(eval_size(s, sizes))
        case Add(lhs=a, rhs=b):
            return _eval_array(a, env, sizes) + _eval_array(b, env, sizes)
        case Sub(lhs=a, rhs=b):
            return _eval_array(a, env, sizes) - _eval_array(b, env, sizes)
        case Mul(lhs=a, rhs=b):
            return _eval_array(a, env, sizes) * _eval_array(b, env, sizes)
        case FloorDiv(lhs=a, rhs=b):
            return _eval_array(a, env, sizes) // _eval_array(b, env, sizes)
        case Mod(lhs=a, rhs=b):
            return _eval_array(a, env, sizes) % _eval_array(b, env, sizes)
    raise TypeError(f"not a coordinate expression: {expr!r}")


def _bounds(
    expr: CoordExpr,
    ranges: Mapping[str, tuple[int, int]],
    sizes: Mapping[str, int],
) -> Optional[tuple[int, int]]:
    """Conservative [lo, hi] interval of an expression's values."""
    match expr:
        case Iterator(name=name):
            return ranges.get(name)
        case IntConst(value=v):
            return (v, v)
        case SizeRef(size=s):
            v = eval_size(s, sizes)
            return (v, v)
        case Add(lhs=a, rhs=b) | Sub(lhs=a, rhs=b) | Mul(lhs=a, rhs=b) | FloorDiv(
            lhs=a, rhs=b
        ) | Mod(lhs=a, rhs=b):
            la = _bounds(a, ranges, sizes)
            lb = _bounds(b, ranges, sizes)
            if la is None or lb is None:
                return None
            (alo, ahi), (blo, bhi) = la, lb
            match expr:
                case Add():
                    return (alo + blo, ahi + bhi)
                case Sub():
                    return (alo - bhi, ahi - blo)
                case Mul():
                    corners = (alo * blo, alo * bhi, ahi * blo, ahi * bhi)
                    return (min(corners), max(corners))
                case FloorDiv():
                    if blo <= 0:
                        return None
                    corners = (alo // blo, alo // bhi, ahi // blo, ahi // bhi)
                    return (min(corners), max(corners))
                case Mod():
                    if blo <= 0:
                        return None
                    if blo == bhi and alo // blo == ahi // blo:
                        return (alo % blo, ahi % blo)
                    return (0, bhi - 1)
    raise TypeError(f"not a coordinate expression: {expr!r}")


def _rename_iters(expr: CoordExpr, names: Mapping[str, str]) -> CoordExpr:
    match expr:
        case Iterator(name=n, size=s):
            return Iterator(names.get(n, n), s)
        case IntConst() | SizeRef():
            return expr
        case Add(lhs=a, rhs=b, domain=d):
            return Add(_rename_iters(a, names), _rename_iters(b, names), domain=d)
        case Sub(lhs=a, rhs=b, domain=d):
            return Sub(_rename_iters(a, names), _rename_iters(b, names), domain=d)
        case Mul(lhs=a, rhs=b, domain=d):
            return Mul(_rename_iters(a, names), _rename_iters(b, names), domain=d)
        case FloorDiv(lhs=a, rhs=b, domain=d):
            return FloorDiv(_rename_iters(a, names), _rename_iters(b, names), domain=d)
        case Mod(lhs=a, rhs=b, domain=d):
            return Mod(_rename_iters(a, names), _rename_iters(b, names), domain=d)
    raise TypeError(f"not a coordinate expression: {expr!r}")


# ---------------------------------------------------------------------------
# Building the single-stage nest from a graph
# ---------------------------------------------------------------------------

def _sanitize(text: str) -> str:
    out = re.sub(r"[^0-9A-Za-z_]", "", text)
    return out or "d"


def _display_names(graph: PGraph) -> dict[str, str]:
    """Human-readable loop names.

    Output axes become ``i_<size>``.  A reduction consumed as an unfold
    window over a single output axis borrows that axis's size, matching
    how convolutions read: ``i_H + r_K_H - K / 2``.  Everything else is
    ``r_<domain>``.  Repeats get a numeric suffix.
    """
    spec = graph.spec
    names: dict[str, str] = {}
    taken: dict[str, int] = {}

    def claim(base: str) -> str:
        n = taken.get(base, 0) + 1
        taken[base] = n
        return base if n == 1 else f"{base}_{n}"

    for k, size in enumerate(spec.output_dims):
        names[f"i{k}"] = claim(f"i_{_sanitize(str(size))}")

    # Walk the construction to see which reduction each unfold consumed
    # as its window and which output axis the data expression tracks.
    window_axis: dict[str, str] = {}
    g = root(spec)
    for step in graph.steps:
        if step.kind == "unfold":
            data = g.dim_by_ident(step.targets[0])
            window = g.dim_by_ident(step.targets[1])
            spatial = [
                it for it in free_iterators(data.expr).values()
                if it.name.startswith("i")
            ]
            if isinstance(window.expr, Iterator) and len(spatial) == 1:
                window_axis.setdefault(
                    window.expr.name, _sanitize(str(spatial[0].size))
                )
        g = apply(g, step)

    for it in graph.reduce_iters:
        base = f"r_{_sanitize(str(it.size))}"
        if it.name in window_axis:
            base = f"{base}_{window_axis[it.name]}"
        names[it.name] = claim(base)
    return names


def build_loop_nest(
    graph: PGraph, assignment: Optional[Mapping[str, int]] = None
) -> LoopNest:
    """Lower a complete graph to its direct single-stage loop nest.

    The input access order comes from the finalization permutation, so
    the nest reads the input tensor in the spec's shape.  Raises
    ShapeMismatch for graphs whose frontier does not match the input.
    """
    spec = graph.spec
    env = dict(assignment) if assignment is not None else spec.assignment
    perm = match_input(graph)
    if perm is None:
        raise ShapeMismatch(f"{spec.name}: frontier does not match the input shape")

    names = _display_names(graph)
    terms = [
        Access(
            "x",
            tuple(_rename_iters(graph.dims[p].expr, names) for p in perm),
        )
    ]
    tensors = [
        TensorDecl(
            "x",
            "input",
            tuple(spec.input_dims),
            tuple(eval_size(s, env) for s in spec.input_dims),
        )
    ]
    for j, w in enumerate(graph.weights):
        terms.append(
            Access(f"w{j}", tuple(_rename_iters(e, names) for e in w.exprs))
        )
        tensors.append(
            TensorDecl(
                f"w{j}",
                "weight",
                tuple(w.sizes),
                tuple(eval_size(s, env) for s in w.sizes),
            )
        )
    tensors.append(
        TensorDecl(
            "y",
            "output",
            tuple(spec.output_dims),
            tuple(eval_size(s, env) for s in spec.output_dims),
        )
    )

    axes = tuple(
        Axis(names[f"i{k}"], size, eval_size(size, env))
        for k, size in enumerate(spec.output_dims)
    )
    reduces = tuple(
        Axis(names[it.name], it.size, eval_size(it.size, env))
        for it in graph.reduce_iters
    )
    stage = Stage("y", axes, reduces, tuple(terms))
    return LoopNest(
        name=spec.name,
        assignment=tuple(sorted(env.items())),
        tensors=tuple(tensors),
        stages=(stage,),
    )


# ---------------------------------------------------------------------------
# Staging (rfactor)
# ---------------------------------------------------------------------------

def nest_flops(nest: LoopNest) -> int:
    """2 ops per multiply-accumulate, summed over stages."""
    total = 0
    for stage in nest.stages:
        n = 2
        for a in stage.axes:
            n *= a.extent
        for r in stage.reduces:
            n *= r.extent
        total += n
    return total


def _shift_expr(expr: CoordExpr, offset: int) -> CoordExpr:
    if offset > 0:
        return Add(expr, IntConst(offset))
    if offset < 0:
        return Sub(expr, IntConst(-offset))
    return expr


def _carve(
    expr: CoordExpr,
    reduce_name: str,
    placeholders: dict[CoordExpr, tuple[Iterator, int]],
    ranges: Mapping[str, tuple[int, int]],
    sizes: Mapping[str, int],
    counter: list[int],
) -> Optional[CoordExpr]:
    """Rewrite an expression over one reduction plus placeholders.

    Maximal subexpressions free of ``reduce_name`` but containing other
    iterators become placeholder coordinates; constants stay inline.
    Returns None when a needed placeholder has no computable interval.
    """
    frees = free_iterators(expr)
    if reduce_name not in frees:
        if not frees:
            return expr
        if expr in placeholders:
            it, lo = placeholders[expr]
            return _shift_expr(it, lo)
        span = _bounds(expr, ranges, sizes)
        if span is None:
            return None
        lo, hi = span
        it = Iterator(f"u{counter[0]}", ONE)
        counter[0] += 1
        placeholders[expr] = (it, lo)
        return _shift_expr(it, lo)
    match expr:
        case Iterator():
            return expr
        case Add(lhs=a, rhs=b, domain=d) | Sub(lhs=a, rhs=b, domain=d) | Mul(
            lhs=a, rhs=b, domain=d
        ) | FloorDiv(lhs=a, rhs=b, domain=d) | Mod(lhs=a, rhs=b, domain=d):
            ca = _carve(a, reduce_name, placeholders, ranges, sizes, counter)
            cb = _carve(b, reduce_name, placeholders, ranges, sizes, counter)
            if ca is None or cb is None:
                return None
            return type(expr)(ca, cb, domain=d)
    raise TypeError(f"not a coordinate expression: {expr!r}")


def _factor_once(nest: LoopNest, reduce_axis: Axis) -> Optional[LoopNest]:
    """Split one reduction of the final stage into its own stage."""
    final = nest.stages[-1]
    sizes = nest.env
    ranges = {a.name: (0, a.extent - 1) for a in final.axes + final.reduces}

    with_r: list[Access] = []
    without_r: list[Access] = []
    for term in final.terms:
        touched = any(reduce_axis.name in free_iterators(e) for e in term.exprs)
        (with_r if touched else without_r).append(term)
    if not with_r:
        return None

    taken = {a.name for s in nest.stages for a in s.axes + s.reduces}
    used = [int(m.group(1)) for m in (re.fullmatch(r"u(\d+)", n) for n in taken) if m]
    counter = [max(used) + 1 if used else 0]
    placeholders: dict[CoordExpr, tuple[Iterator, int]] = {}
    carved_terms: list[Access] = []
    for term in with_r:
        carved = []
        for e in term.exprs:
            ce = _carve(e, reduce_axis.name, placeholders, ranges, sizes, counter)
            if ce is None:
                return None
            carved.append(ce)
        carved_terms.append(Access(term.tensor, tuple(carved)))

    stage_no = sum(1 for t in nest.tensors if t.role == "stage")
    name = f"t{stage_no}"
    order = list(placeholders.items())  # insertion order = deterministic
    axes = []
    outer_exprs = []
    for sub, (it, lo) in order:
        hi = _bounds(sub, ranges, sizes)[1]
        axes.append(Axis(it.name, hi - lo + 1, hi - lo + 1))
        outer_exprs.append(_shift_expr(sub, -lo))

    mid = Stage(name, tuple(axes), (reduce_axis,), tuple(carved_terms))
    decl = TensorDecl(
        name,
        "stage",
        tuple(a.extent for a in axes),
        tuple(a.extent for a in axes),
    )
    last = Stage(
        final.tensor,
        final.axes,
        tuple(r for r in final.reduces if r.name != reduce_axis.name),
        tuple(without_r) + (Access(name, tuple(outer_exprs)),),
    )
    tensors = nest.tensors[:-1] + (decl, nest.tensors[-1])
    return LoopNest(
        nest.name, nest.assignment, tensors, nest.stages[:-1] + (mid, last)
    )


def rfactor(nest: LoopNest) -> LoopNest:
    """Factor reductions into intermediate stages while FLOPs drop.

    Greedy: each round tries every reduction of the final stage and
    keeps the cheapest strict improvement.  The result never costs
    more than the input nest, and a single-reduction nest that gains
    nothing comes back unchanged.
    """
    while True:
        best = None
        for r in nest.stages[-1].reduces:
            candidate = _factor_once(nest, r)
            if candidate is not None and nest_flops(candidate) < nest_flops(
                best if best is not None else nest
            ):
                best = candidate
        if best is None:
            return nest
        nest = best


# ---------------------------------------------------------------------------
# Running a nest
# ---------------------------------------------------------------------------

def _run_stage(
    stage: Stage, vals: Mapping[str, np.ndarray], extents: Mapping[str, tuple[int, ...]],
    sizes: Mapping[str, int],
) -> np.ndarray:
    loops = stage.axes + stage.reduces
    rank = len(loops)
    shape = tuple(a.extent for a in loops)
    env = {
        a.name: np.arange(a.extent, dtype=np.int64).reshape(
            (1,) * k + (-1,) + (1,) * (rank - k - 1)
        )
        for k, a in enumerate(loops)
    }
    acc: np.ndarray = np.float64(1.0)
    for term in stage.terms:
        tensor = vals[term.tensor]
        if not term.exprs:
            acc = acc * tensor
            continue
        dims = extents[term.tensor]
        valid = np.bool_(True)
        clipped = []
        for e, n in zip(term.exprs, dims):
            idx = _eval_array(e, env, sizes)
            valid = valid & (idx >= 0) & (idx < n)
            clipped.append(np.clip(idx, 0, n - 1))
        gathered = tensor[tuple(clipped)] * valid
        acc = acc * gathered
    acc = np.broadcast_to(acc, shape)
    if stage.reduces:
        return acc.sum(axis=tuple(range(len(stage.axes), rank)))
    return acc.copy()


def run_nest(nest: LoopNest, x: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate one batch element through every stage."""
    sizes = nest.env
    vals: dict[str, np.ndarray] = {}
    extents: dict[str, tuple[int, ...]] = {}
    wi = iter(weights)
    for decl in nest.tensors:
        if decl.role == "input":
            arr = np.asarray(x, dtype=np.float64)
        elif decl.role == "weight":
            arr = np.asarray(next(wi), dtype=np.float64)
        else:
            continue
        if arr.shape != decl.extents:
            raise ShapeMismatch(
                f"{decl.name}: expected shape {decl.extents}, got {arr.shape}"
            )
        vals[decl.name] = arr
        extents[decl.name] = decl.extents
    for stage in nest.stages:
        out = _run_stage(stage, vals, extents, sizes)
        vals[stage.tensor] = out
        extents[stage.tensor] = out.shape
    return vals[nest.stages[-1].tensor]


def output_shape(spec: ProblemSpec, assignment: Optional[Mapping[str, int]] = None) -> tuple[int, ...]:
    env = dict(assignment) if assignment is not None else spec.assignment
    return tuple(eval_size(s, env) for s in spec.batch_dims + spec.output_dims)


def input_shape(spec: ProblemSpec, assignment: Optional[Mapping[str, int]] = None) -> tuple[int, ...]:
    env = dict(assignment) if assignment is not None else spec.assignment
    return tuple(eval_size(s, env) for s in spec.batch_dims + spec.input_dims)


def weight_shapes(graph: PGraph, assignment: Optional[Mapping[str, int]] = None) -> list[tuple[int, ...]]:
    env = dict(assignment) if assignment is not None else graph.spec.assignment
    return [tuple(eval_size(s, env) for s in w.sizes) for w in graph.weights]


def random_weights(
    graph: PGraph,
    rng: np.random.Generator,
    assignment: Optional[Mapping[str, int]] = None,
) -> list[np.ndarray]:
    return [rng.standard_normal(shape) for shape in weight_shapes(graph, assignment)]


def interpret(
    graph: PGraph,
    x: np.ndarray,
    weights: Sequence[np.ndarray] = (),
    assignment: Optional[Mapping[str, int]] = None,
    staged: bool = False,
) -> np.ndarray:
    """Run an operator on an input tensor (leading batch axes allowed).

    ``staged`` lowers through rfactor first; the result is identical
    within float tolerance, by construction.
    """
    spec = graph.spec
    env = dict(assignment) if assignment is not None else spec.assignment
    nest = build_loop_nest(graph, env)
    if staged:
        nest = rfactor(nest)
    if len(weights) != len(graph.weights):
        raise ShapeMismatch(
            f"{spec.name}: expected {len(graph.weights)} weight tensors, got {len(weights)}"
        )
    x = np.asarray(x, dtype=np.float64)
    batch = tuple(eval_size(s, env) for s in spec.batch_dims)
    in_shape = tuple(eval_size(s, env) for s in spec.input_dims)
    if x.shape != batch + in_shape:
        raise ShapeMismatch(
            f"{spec.name}: expected input shape {batch + in_shape}, got {x.shape}"
        )
    if not batch:
        return run_nest(nest, x, weights)
    flat = x.reshape((-1,) + in_shape)
    out = np.stack([run_nest(nest, elem, weights) for elem in flat])
    return out.reshape(batch + out.shape[1:])


def flops(
    graph: PGraph,
    assignment: Optional[Mapping[str, int]] = None,
    staged: bool = False,
) -> int:
    """Multiply-accumulate count of the lowered nest, 2 ops per MAC.

    Unstaged this is 2 * prod(output extents) * prod(reduction
    extents); staged it sums the same formula per stage.  Batch axes
    multiply in when the spec has them.
    """
    nest = build_loop_nest(graph, assignment)
    if staged:
        nest = rfactor(nest)
    env = dict(assignment) if assignment is not None else graph.spec.assignment
    batch = 1
    for s in graph.spec.batch_dims:
        batch *= eval_size(s, env)
    return batch * nest_flops(nest)


def param_count(graph: PGraph, assignment: Optional[Mapping[str, int]] = None) -> int:
    """Total weight elements under an assignment."""
    env = dict(assignment) if assignment is not None else None
    return weight_count(graph, env)


# ---------------------------------------------------------------------------
# Gradient with respect to the weights
# ---------------------------------------------------------------------------

def weight_gradient(
    graph: PGraph,
    x: np.ndarray,
    upstream: np.ndarray,
    weights: Sequence[np.ndarray],
    assignment: Optional[Mapping[str, int]] = None,
) -> list[np.ndarray]:
    """Gradient of <upstream, output> with respect to each weight.

    The output is linear in every weight tensor, so the gradient for
    w_j accumulates upstream times the product of all other accessed
    factors at each grid point.  Out-of-range accesses contributed a
    constant zero and therefore no gradient.
    """
    spec = graph.spec
    env = dict(assignment) if assignment is not None else spec.assignment
    nest = build_loop_nest(graph, env)
    stage = nest.stages[-1]
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    batch = tuple(eval_size(s, env) for s in spec.batch_dims)
    in_shape = tuple(eval_size(s, env) for s in spec.input_dims)
    out_shape = tuple(eval_size(s, env) for s in spec.output_dims)
    if x.shape != batch + in_shape:
        raise ShapeMismatch(f"expected input shape {batch + in_shape}, got {x.shape}")
    if upstream.shape != batch + out_shape:
        raise ShapeMismatch(
            f"expected upstream shape {batch + out_shape}, got {upstream.shape}"
        )
    if len(weights) != len(graph.weights):
        raise ShapeMismatch(
            f"expected {len(graph.weights)} weight tensors, got {len(weights)}"
        )

    loops = stage.axes + stage.reduces
    rank = len(loops)
    grid = {
        a.name: np.arange(a.extent, dtype=np.int64).reshape(
            (1,) * k + (-1,) + (1,) * (rank - k - 1)
        )
        for k, a in enumerate(loops)
    }
    shape = tuple(a.extent for a in loops)
    sizes = nest.env

    # Index arrays and masks are batch-independent; compute them once.
    gathered: list[tuple[Access, list[np.ndarray], np.ndarray]] = []
    for term in stage.terms:
        dims = nest.tensor(term.tensor).extents
        valid = np.broadcast_to(np.bool_(True), shape)
        clipped = []
        for e, n in zip(term.exprs, dims):
            idx = _eval_array(e, grid, sizes)
            valid = valid & (idx >= 0) & (idx < n)
            clipped.append(np.broadcast_to(np.clip(idx, 0, n - 1), shape))
        gathered.append((term, clipped, valid))

    warrs = [np.asarray(w, dtype=np.float64) for w in weights]
    grads = [np.zeros_like(w) for w in warrs]
    x_flat = x.reshape((-1,) + in_shape)
    up_flat = upstream.reshape((-1,) + out_shape)
    up_pad = (slice(None),) * len(stage.axes) + (None,) * len(stage.reduces)

    term_of = {term.tensor: k for k, (term, _, _) in enumerate(gathered)}
    for b in range(x_flat.shape[0]):
        factors = []
        for term, clipped, valid in gathered:
            arr = x_flat[b] if term.tensor == "x" else warrs[int(term.tensor[1:])]
            factors.append(arr[tuple(clipped)] * valid)
        up = up_flat[b][up_pad]
        for j in range(len(warrs)):
            own = term_of[f"w{j}"]
            contrib = up * gathered[own][2]
            for k in range(len(gathered)):
                if k != own:
                    contrib = contrib * factors[k]
            np.add.at(
                grads[j], tuple(gathered[own][1]), np.broadcast_to(contrib, shape)
            )
    return grads


# ---------------------------------------------------------------------------
# Pseudocode emission and parsing
# ---------------------------------------------------------------------------

def emit_loop_nest(nest: LoopNest) -> str:
    """Nested-loop pseudocode, deterministic byte for byte.

    Grammar (one construct per line, two-space indents)::

        nest <name>
        tensor <name> = input[<sizes>] | weight <j> [<sizes>]
                      | stage[<extents>] | output[<sizes>]
        for <loop> in <size>:
        acc = 0
        acc += <tensor>[<exprs>] * ...
        <tensor>[<loops>] = acc | <terms>
    """
    lines = [f"nest {nest.name}"]
    for t in nest.tensors:
        sizes = ", ".join(_size_str(s) for s in t.sizes)
        if t.role == "weight":
            lines.append(f"tensor {t.name} = weight {t.name[1:]} [{sizes}]")
        else:
            lines.append(f"tensor {t.name} = {t.role}[{sizes}]")
    for stage in nest.stages:
        pad = ""
        for a in stage.axes:
            lines.append(f"{pad}for {a.name} in {_size_str(a.size)}:")
            pad += "  "
        target = f"{stage.tensor}[{', '.join(a.name for a in stage.axes)}]"
        if not stage.axes:
            target = stage.tensor
        terms = " * ".join(
            f"{t.tensor}[{', '.join(render_expr(e, spaced=True) for e in t.exprs)}]"
            if t.exprs
            else t.tensor
            for t in stage.terms
        )
        if stage.reduces:
            lines.append(f"{pad}acc = 0")
            inner = pad
            for r in stage.reduces:
                lines.append(f"{inner}for {r.name} in {_size_str(r.size)}:")
                inner += "  "
            lines.append(f"{inner}acc += {terms}")
            lines.append(f"{pad}{target} = acc")
        else:
            lines.append(f"{pad}{target} = {terms}")
    return "\n".join(lines) + "\n"


_TENSOR_RE = re.compile(
    r"^tensor (?P<name>\w+) = (?P<role>input|output|stage|weight)"
    r"(?: (?P<index>\d+))? ?\[(?P<sizes>[^\]]*)\]$"
)
_FOR_RE = re.compile(r"^for (?P<name>\w+) in (?P<size>[^:]+):$")
_ACCESS_RE = re.compile(r"(\w+)\[([^\]]*)\]|(\w+)")


def _parse_terms(
    text: str,
    iters: Mapping[str, Iterator],
    spec: ProblemSpec,
) -> tuple[Access, ...]:
    # split on " * " only outside index brackets; expressions inside
    # an access can themselves contain spaced multiplies
    parts = []
    depth = 0
    start = 0
    k = 0
    while k < len(text):
        if text[k] == "[":
            depth += 1
        elif text[k] == "]":
            depth -= 1
        elif depth == 0 and text.startswith(" * ", k):
            parts.append(text[start:k])
            start = k + 3
            k += 2
        k += 1
    parts.append(text[start:])

    terms = []
    for part in parts:
        part = part.strip()
        m = re.fullmatch(r"(\w+)\[([^\]]*)\]", part)
        if m:
            exprs = tuple(
                parse_expr(e.strip(), iters, spec.var_map)
                for e in m.group(2).split(",")
                if e.strip()
            )
            terms.append(Access(m.group(1), exprs))
        elif re.fullmatch(r"\w+", part):
            terms.append(Access(part, ()))
        else:
            raise LoopNestParseError(f"bad term: {part!r}")
    return tuple(terms)


def parse_loop_nest(text: str, spec: ProblemSpec) -> LoopNest:
    """Inverse of emit_loop_nest under a spec's variables.

    Extents are re-derived from the spec's reference assignment (or
    taken literally for stage tensors, whose sizes are integers).
    """
    env = spec.assignment
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("nest "):
        raise LoopNestParseError("missing nest header")
    name = lines[0][len("nest "):].strip()

    def parse_sizes(raw: str) -> tuple[SizeLike, ...]:
        out: list[SizeLike] = []
        for piece in raw.split(","):
            piece = piece.strip()
            if not piece:
                continue
            out.append(int(piece) if piece.isdigit() else parse_size(piece, spec.var_map))
        return tuple(out)

    tensors: list[TensorDecl] = []
    pos = 1
    while pos < len(lines) and lines[pos].startswith("tensor "):
        m = _TENSOR_RE.match(lines[pos])
        if not m:
            raise LoopNestParseError(f"bad tensor line: {lines[pos]!r}")
        sizes = parse_sizes(m.group("sizes"))
        tensors.append(
            TensorDecl(
                m.group("name"),
                m.group("role"),
                sizes,
                tuple(_extent(s, env) for s in sizes),
            )
        )
        pos += 1

    stages: list[Stage] = []
    while pos < len(lines):
        axes: list[Axis] = []
        reduces: list[Axis] = []
        iters: dict[str, Iterator] = {}

        def read_for(line: str) -> Optional[Axis]:
            m = _FOR_RE.match(line.strip())
            if not m:
                return None
            raw = m.group("size").strip()
            size: SizeLike = int(raw) if raw.isdigit() else parse_size(raw, spec.var_map)
            sym = size if isinstance(size, SymbolicSize) else ONE
            iters[m.group("name")] = Iterator(m.group("name"), sym)
            return Axis(m.group("name"), size, _extent(size, env))

        while pos < len(lines):
            axis = read_for(lines[pos])
            if axis is None:
                break
            body = lines[pos + 1].strip() if pos + 1 < len(lines) else ""
            axes.append(axis)
            pos += 1
            if body == "acc = 0":
                break
        stripped = lines[pos].strip()
        if stripped == "acc = 0":
            pos += 1
            while pos < len(lines):
                axis = read_for(lines[pos])
                if axis is None:
                    break
                reduces.append(axis)
                pos += 1
            stripped = lines[pos].strip()
            if not stripped.startswith("acc += "):
                raise LoopNestParseError(f"expected accumulation, got {stripped!r}")
            terms = _parse_terms(stripped[len("acc += "):], iters, spec)
            pos += 1
            stripped = lines[pos].strip()
            m = re.fullmatch(r"(\w+)(?:\[[^\]]*\])? = acc", stripped)
            if not m:
                raise LoopNestParseError(f"expected store, got {stripped!r}")
            tensor = m.group(1)
            pos += 1
        else:
            m = re.fullmatch(r"(\w+)(?:\[[^\]]*\])? = (.+)", stripped)
            if not m:
                raise LoopNestParseError(f"expected assignment, got {stripped!r}")
            tensor = m.group(1)
            terms = _parse_terms(m.group(2), iters, spec)
            pos += 1
        stages.append(Stage(tensor, tuple(axes), tuple(reduces), terms))

    return LoopNest(
        name=name,
        assignment=tuple(sorted(env.items())),
        tensors=tuple(tensors),
        stages=tuple(stages),
    )


# ---------------------------------------------------------------------------
# Tensor file format
# ---------------------------------------------------------------------------

def save_tensor(path, array: np.ndarray) -> None:
    """rank, then dims, as little-endian int64; float64 row-major payload."""
    arr = np.asarray(array, dtype="<f8")
    with open(path, "wb") as f:
        f.write(np.array([arr.ndim], dtype="<i8").tobytes())
        f.write(np.array(arr.shape, dtype="<i8").tobytes())
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ShapeMismatch("tensor file too short for a header")
    rank = int(np.frombuffer(data[:8], dtype="<i8")[0])
    if rank < 0 or len(data) < 8 + 8 * rank:
        raise ShapeMismatch("tensor file header truncated")
    dims = tuple(int(d) for d in np.frombuffer(data[8 : 8 + 8 * rank], dtype="<i8"))
    count = 1
    for d in dims:
        count *= d
    payload = data[8 + 8 * rank :]
    if len(payload) != 8 * count:
        raise ShapeMismatch(
            f"tensor payload holds {len(payload) // 8} values, header says {count}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
