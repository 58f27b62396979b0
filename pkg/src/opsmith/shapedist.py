"""Admissible distance from a partial graph to its input shape.

The search needs a quick answer to "at least how many more steps until
the frontier can match the input?".  The estimate partitions the
frontier and the input dims into reshape groups and sums per-group
costs, minimizing over all partitions.  Per group, with L the frontier
side and R the input side:

    balanced        numel(L) = numel(R): connecting the kept dims takes
                    at least |L|-1 splits and |R|-1 merges.
    excess          numel(L) strictly larger: leftover content must be
                    eliminated, either as whole window dims that an
                    unfold throws away or as one carved-off excess dim.
    deficient       numel(R) strictly larger: missing content is
                    created either by a reduction (+1, only while the
                    graph is still in its reduction stage) or by a
                    stride followed by the unfold that legalizes it
                    (+2).

Strided frontier dims charge their mandatory unfold (+1), and each
such unfold absorbs one eliminated dim for free as its window.
Eliminated dims beyond the free windows are priced by what can remove
them: reduction-pure dims survive a contraction (their iterator still
has to reach an input access), so each needs its own unfold or expand
(+1); plain dims can all ride one contraction together, charged once
per group on the strict reading and once globally on the bundled
reading (the final min picks whichever is cheaper).

The result never exceeds the length of a true completion: every
completion's step sequence decomposes into connected reshape groups,
and each group's steps are bounded below by the formulas above.  It
deliberately ignores interactions that only make completions longer
(occurrence limits, window bounds, contraction adjacency), trading
tightness for safety.

shape_distance returns +inf when no grouping is valid, which happens
when content must be created from nothing after the reduction stage
closed.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence, Union

from .pgraph import Dim, PGraph
from .symexpr import SymbolicSize, Variable

INF = float("inf")


@dataclass(frozen=True)
class DimDesc:
    """What the distance needs to know about one frontier dim."""

    size: SymbolicSize
    reduce_pure: bool = False
    strided: bool = False


def desc_of_dim(d: Dim) -> DimDesc:
    return DimDesc(d.size, d.reduce_pure, d.strided)


@dataclass(frozen=True)
class ReshapeGroup:
    lhs: tuple[SymbolicSize, ...]
    rhs: tuple[SymbolicSize, ...]

    @property
    def needs_elimination(self) -> bool:
        return _powers(self.lhs) != _powers(self.rhs)


def group_cost(group: ReshapeGroup) -> int:
    """Step count charged to one reshape group, in its simplest form.

    Balanced groups cost |lhs| + |rhs| - 2; groups that also eliminate
    content cost one more, and never less than 1.  The full distance
    below refines this (bundled eliminations, creation, strides), but
    this is the unit the per-group accounting is built from.
    """
    n = len(group.lhs) + len(group.rhs)
    if group.needs_elimination:
        return max(n - 1, 1)
    return max(n - 2, 0)


@dataclass(frozen=True)
class DistanceResult:
    distance: float
    groups: tuple[ReshapeGroup, ...] = ()
    permutation: Optional[tuple[int, ...]] = None


def _powers(sizes: Sequence[SymbolicSize]) -> tuple[tuple[Variable, int], ...]:
    acc: dict[Variable, int] = {}
    for s in sizes:
        for v, e in s.powers:
            acc[v] = acc.get(v, 0) + e
    return tuple(sorted(((v, e) for v, e in acc.items() if e), key=lambda p: p[0].name))


# Descriptors and target sizes are interned to small ints so the memo
# keys below hash in constant time, with the fields the hot loops need
# mirrored into parallel lists.  The tables only grow; clear_cache
# resets them together with the memos that index into them.
_desc_ids: dict[DimDesc, int] = {}
_desc_table: list[DimDesc] = []
_desc_pows: list[tuple[tuple[Variable, int], ...]] = []
_desc_pure: list[bool] = []
_desc_strided: list[bool] = []
_size_ids: dict[SymbolicSize, int] = {}
_size_table: list[SymbolicSize] = []
_size_pows: list[tuple[tuple[Variable, int], ...]] = []


def _intern_desc(d: DimDesc) -> int:
    i = _desc_ids.get(d)
    if i is None:
        i = len(_desc_table)
        _desc_ids[d] = i
        _desc_table.append(d)
        _desc_pows.append(d.size.powers)
        _desc_pure.append(d.reduce_pure)
        _desc_strided.append(d.strided)
    return i


def _intern_size(s: SymbolicSize) -> int:
    i = _size_ids.get(s)
    if i is None:
        i = len(_size_table)
        _size_ids[s] = i
        _size_table.append(s)
        _size_pows.append(s.powers)
    return i


_opt_memo: dict = {}


def _group_options(
    sub_ids: tuple[int, ...], rhs_ids: tuple[int, ...], may_reduce: bool
) -> tuple[float, float]:
    """Cheapest readings of one group: (plain, any).

    The first entry pays every elimination inside the group; the second
    lets leftover plain dims ride the shared contraction whose +1 the
    caller charges once globally.  (INF, INF) when no reading is valid.

    A reading picks which member dims are windows (whole dims whose
    content an unfold throws away) and how a content deficit, if any,
    is repaired.  The remaining kept dims must carry exactly the rhs
    content, possibly with one carved-off excess dim, and are charged
    the reshape lower bound: at least |kept|-1 splits and |rhs|-1
    merges connect them.  Every strided dim costs its mandatory unfold,
    and each of those unfolds absorbs one eliminated dim for free;
    eliminated dims beyond that cost one step each when reduction-pure
    (only an unfold window or an expand removes them) while plain ones
    share a single contraction, local or global.
    """
    key = (sub_ids, rhs_ids, may_reduce)
    hit = _opt_memo.get(key)
    if hit is not None:
        return hit
    strided = tuple(i for i in sub_ids if _desc_strided[i])
    normal = tuple(i for i in sub_ids if not _desc_strided[i])
    strided_n = len(strided)
    rhs_pow: dict[Variable, int] = {}
    for i in rhs_ids:
        for v, e in _size_pows[i]:
            rhs_pow[v] = rhs_pow.get(v, 0) + e
    n_rhs = len(rhs_ids)
    n_normal = len(normal)
    base_pow = {v: -e for v, e in rhs_pow.items()}
    for i in strided:
        for v, e in _desc_pows[i]:
            base_pow[v] = base_pow.get(v, 0) + e
    min_plain = min_any = INF
    for wk in range(n_normal + 1):
        for windows in combinations(range(n_normal), wk):
            kept_normal = tuple(
                normal[k] for k in range(n_normal) if k not in windows
            )
            kept_n = strided_n + len(kept_normal)
            q = dict(base_pow)
            for i in kept_normal:
                for v, e in _desc_pows[i]:
                    q[v] = q.get(v, 0) + e
            neg = any(e < 0 for e in q.values())
            pos = any(e > 0 for e in q.values())
            w_pure = sum(1 for k in windows if _desc_pure[normal[k]])
            w_plain = wk - w_pure
            carve_pure = bool(kept_normal or strided) and all(
                _desc_pure[i] for i in kept_normal
            ) and not any(not _desc_pure[i] for i in strided)
            for repairs in (0, 1):
                if repairs and (not neg or kept_n == 0):
                    continue
                created = 0
                if neg and not repairs:
                    if not may_reduce:
                        continue
                    created = 1
                carve = 1 if pos else 0
                pure_items = w_pure + (carve if carve_pure else 0)
                plain_items = w_plain + (carve if not carve_pure else 0)
                slots = strided_n + repairs
                pure_left = pure_items - slots
                slots_left = -pure_left if pure_left < 0 else 0
                if pure_left < 0:
                    pure_left = 0
                plain_left = max(plain_items - slots_left, 0)
                cost = (
                    strided_n
                    + 2 * repairs
                    + created
                    + max(kept_n + created - 1, 0)
                    + max(n_rhs + carve - 1, 0)
                    + pure_left
                )
                if cost < min_any:
                    min_any = cost
                if plain_left:
                    cost += 1
                if cost < min_plain:
                    min_plain = cost
    result = (min_plain, min_any)
    _opt_memo[key] = result
    return result


_memo: dict = {}


def _t_choices(
    target_ids: tuple[int, ...]
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(rhs, remaining) readings that pin the first target into the
    group under construction, so each partition is enumerated once."""
    first, pool = target_ids[0], target_ids[1:]
    n = len(pool)
    out = []
    for tk in range(n + 1):
        for tsel in combinations(range(n), tk):
            rhs = (first,) + tuple(pool[i] for i in tsel)
            rem = tuple(pool[i] for i in range(n) if i not in tsel)
            out.append((rhs, rem))
    return out


def _splits(
    dim_ids: tuple[int, ...], target_ids: tuple[int, ...]
):
    """First reshape group candidates (sub, rhs, rem_d, rem_t).

    The first remaining target (or, once targets run out, the first
    remaining dim) is pinned into the group, so each partition is
    enumerated exactly once.
    """
    if target_ids:
        t_choices = _t_choices(target_ids)
        pinned: tuple[int, ...] = ()
        d_pool = dim_ids
    else:
        t_choices = [((), ())]
        pinned = dim_ids[:1]
        d_pool = dim_ids[1:]
    nd = len(d_pool)
    for dk in range(nd + 1):
        for dsel in combinations(range(nd), dk):
            sub = pinned + tuple(d_pool[i] for i in dsel)
            rem_d = tuple(d_pool[i] for i in range(nd) if i not in dsel)
            for rhs, rem_t in t_choices:
                yield sub, rhs, rem_d, rem_t


def _search(
    dim_ids: tuple[int, ...],
    target_ids: tuple[int, ...],
    may_reduce: bool,
) -> tuple[float, float]:
    """Best cost without any bundled elimination, and best allowing
    them (the shared +1 charged by the caller)."""
    key = (dim_ids, target_ids, may_reduce)
    hit = _memo.get(key)
    if hit is not None:
        return hit
    if not dim_ids and not target_ids:
        _memo[key] = (0.0, 0.0)
        return (0.0, 0.0)

    memo = _memo
    opt_memo = _opt_memo
    best_plain = best_any = INF
    if target_ids:
        t_choices = _t_choices(target_ids)
        pinned: tuple[int, ...] = ()
        d_pool = dim_ids
    else:
        t_choices = [((), ())]
        pinned = dim_ids[:1]
        d_pool = dim_ids[1:]
    nd = len(d_pool)
    for dk in range(nd + 1):
        for dsel in combinations(range(nd), dk):
            sub = pinned + tuple(d_pool[i] for i in dsel)
            rem_d = tuple(d_pool[i] for i in range(nd) if i not in dsel)
            for rhs, rem_t in t_choices:
                okey = (sub, rhs, may_reduce)
                opts = opt_memo.get(okey)
                if opts is None:
                    opts = _group_options(sub, rhs, may_reduce)
                g_plain, g_any = opts
                if g_any == INF:
                    continue
                tkey = (rem_d, rem_t, may_reduce)
                tail = memo.get(tkey)
                if tail is None:
                    tail = _search(rem_d, rem_t, may_reduce)
                t_plain, t_any = tail
                c = g_plain + t_plain
                if c < best_plain:
                    best_plain = c
                c = g_any + (t_any if t_any < t_plain else t_plain)
                if c < best_any:
                    best_any = c

    result = (best_plain, best_any)
    _memo[key] = result
    return result


def _witness(
    dim_ids: tuple[int, ...],
    target_ids: tuple[int, ...],
    may_reduce: bool,
    flexible: bool,
) -> tuple[ReshapeGroup, ...]:
    """Reconstruct one optimal grouping by walking the memoized costs."""
    if not dim_ids and not target_ids:
        return ()
    plain, any_ = _search(dim_ids, target_ids, may_reduce)
    want = any_ if flexible else plain
    for sub, rhs, rem_d, rem_t in _splits(dim_ids, target_ids):
        g_plain, g_any = _group_options(sub, rhs, may_reduce)
        head = g_any if flexible else g_plain
        if head == INF:
            continue
        t_plain, t_any = _search(rem_d, rem_t, may_reduce)
        tail = min(t_plain, t_any) if flexible else t_plain
        if head + tail == want:
            group = ReshapeGroup(
                tuple(_desc_table[i].size for i in sub),
                tuple(_size_table[i] for i in rhs),
            )
            return (group,) + _witness(rem_d, rem_t, may_reduce, flexible)
    raise AssertionError("optimal cost has no matching grouping")


def _intern_problem(
    current: Sequence[Union[DimDesc, SymbolicSize]],
    input_dims: Sequence[SymbolicSize],
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Interned, multiset-canonical keys (sorting by id is stable
    because equal descriptors always intern to the same id)."""
    dim_ids = tuple(sorted(
        _intern_desc(d if isinstance(d, DimDesc) else DimDesc(d)) for d in current
    ))
    target_ids = tuple(sorted(_intern_size(s) for s in input_dims))
    return dim_ids, target_ids


def explain_distance(
    current: Sequence[Union[DimDesc, SymbolicSize]],
    input_dims: Sequence[SymbolicSize],
    may_reduce: bool = False,
) -> DistanceResult:
    dim_ids, target_ids = _intern_problem(current, input_dims)
    no_c, fl_c = _search(dim_ids, target_ids, may_reduce)
    if no_c <= fl_c + 1:
        dist, flexible = no_c, False
    else:
        dist, flexible = fl_c + 1, True
    if dist == INF:
        return DistanceResult(INF)
    witness = _witness(dim_ids, target_ids, may_reduce, flexible)
    perm = None
    if dist == 0:
        used: set[int] = set()
        order = []
        plain = [d if isinstance(d, DimDesc) else DimDesc(d) for d in current]
        for size in input_dims:
            for k, d in enumerate(plain):
                if k not in used and d.size == size:
                    used.add(k)
                    order.append(k)
                    break
        perm = tuple(order)
    return DistanceResult(dist, witness, perm)


def shape_distance(
    current: Sequence[Union[DimDesc, SymbolicSize]],
    input_dims: Sequence[SymbolicSize],
    may_reduce: bool = False,
) -> float:
    dim_ids, target_ids = _intern_problem(current, input_dims)
    no_c, fl_c = _search(dim_ids, target_ids, may_reduce)
    return min(no_c, fl_c + 1)


def graph_distance(graph: PGraph) -> float:
    return shape_distance(
        [desc_of_dim(d) for d in graph.dims],
        graph.spec.input_dims,
        may_reduce=graph.in_reduction,
    )


def clear_cache() -> None:
    _memo.clear()
    _opt_memo.clear()
    _desc_ids.clear()
    _desc_table.clear()
    _desc_pows.clear()
    _desc_pure.clear()
    _desc_strided.clear()
    _size_ids.clear()
    _size_table.clear()
    _size_pows.clear()
