from __future__ import annotations

import random

from conftest import CONV_STEPS, build_spec
from opsmith.pgraph import Step, apply, end_reductions, parse_steps, root
from opsmith.shapedist import (
    INF,
    DimDesc,
    ReshapeGroup,
    explain_distance,
    graph_distance,
    group_cost,
    shape_distance,
)
from opsmith.symexpr import parse_size


def strided_spec():
    return build_spec(
        "strided",
        ("C_in", "H", "W"),
        ("s", "k"),
        {"C_in": 8, "H": 8, "W": 8, "s": 2, "k": 3},
        ("C_in", "H", "W"),
        ("C_in", "H", "W"),
    )


def s(spec, text):
    return parse_size(text, spec.var_map)


def test_group_cost_values():
    spec = strided_spec()
    balanced = ReshapeGroup(
        (s(spec, "H*s^-1"), s(spec, "W*s")), (s(spec, "H"), s(spec, "W"))
    )
    assert not balanced.needs_elimination
    assert group_cost(balanced) == 2

    matched = ReshapeGroup((s(spec, "C_in"),), (s(spec, "C_in"),))
    assert group_cost(matched) == 0

    eliminate = ReshapeGroup((s(spec, "k"),), ())
    assert eliminate.needs_elimination
    assert group_cost(eliminate) == 1


def test_worked_strided_distance():
    spec = strided_spec()
    current = [
        DimDesc(s(spec, "C_in")),
        DimDesc(s(spec, "H*s^-1")),
        DimDesc(s(spec, "W*s"), strided=True),
        DimDesc(s(spec, "k"), reduce_pure=True),
    ]
    target = [s(spec, "C_in"), s(spec, "H"), s(spec, "W")]
    assert shape_distance(current, target, may_reduce=False) == 3

    result = explain_distance(current, target, may_reduce=False)
    assert result.distance == 3
    covered = [size for g in result.groups for size in g.rhs]
    assert sorted(map(str, covered)) == sorted(map(str, target))


def test_window_eliminations_cost_one_each(conv2d):
    k = s(conv2d, "K")
    current = [
        DimDesc(s(conv2d, "C_in")),
        DimDesc(s(conv2d, "H")),
        DimDesc(s(conv2d, "W")),
        DimDesc(k, reduce_pure=True),
        DimDesc(k, reduce_pure=True),
    ]
    target = conv2d.input_dims
    assert shape_distance(current, target) == 2


def test_bundled_elimination_costs_one_total(conv2d):
    current = [
        DimDesc(s(conv2d, "C_in")),
        DimDesc(s(conv2d, "H")),
        DimDesc(s(conv2d, "W")),
        DimDesc(s(conv2d, "C_out")),
        DimDesc(s(conv2d, "C_out")),
    ]
    assert shape_distance(current, conv2d.input_dims) == 1


def test_deficit_repair_via_stride(conv2d):
    spec = strided_spec()
    current = [
        DimDesc(s(spec, "H*s^-1")),
        DimDesc(s(spec, "k"), reduce_pure=True),
    ]
    assert shape_distance(current, [s(spec, "H")], may_reduce=False) == 2


def test_creation_needs_reduction_stage():
    spec = strided_spec()
    assert shape_distance([], [s(spec, "C_in")], may_reduce=False) == INF
    assert shape_distance([], [s(spec, "C_in")], may_reduce=True) == 1


def test_conv2d_progression(conv2d):
    g = root(conv2d)
    assert graph_distance(g) == 2

    k = next(p for p in g.spec.output_dims if str(p) == "C_out")
    del k
    g = apply(g, Step("reduce", (), s(conv2d, "C_in")))
    assert graph_distance(g) == 1

    done = parse_steps(CONV_STEPS, conv2d)
    assert graph_distance(done) == 0
    result = explain_distance(
        [DimDesc(d.size, d.reduce_pure, d.strided) for d in done.dims],
        conv2d.input_dims,
    )
    assert result.permutation == (0, 1, 2)


def test_distance_zero_iff_matchable(conv2d):
    sizes = [s(conv2d, n) for n in ("C_in", "H", "W", "C_out", "K")]
    rng = random.Random(7)
    for _ in range(80):
        picked = [rng.choice(sizes) for _ in range(rng.randint(1, 4))]
        strided = [rng.random() < 0.2 for _ in picked]
        current = [DimDesc(sz, strided=st) for sz, st in zip(picked, strided)]
        d = shape_distance(current, conv2d.input_dims)
        matchable = (
            sorted(map(str, picked)) == sorted(map(str, conv2d.input_dims))
            and not any(strided)
        )
        assert (d == 0) == matchable, (picked, strided, d)


def test_distance_is_permutation_invariant(conv2d):
    spec = strided_spec()
    current = [
        DimDesc(s(spec, "W*s"), strided=True),
        DimDesc(s(spec, "k"), reduce_pure=True),
        DimDesc(s(spec, "C_in")),
        DimDesc(s(spec, "H*s^-1")),
    ]
    target = [s(spec, "C_in"), s(spec, "H"), s(spec, "W")]
    rng = random.Random(3)
    reference = shape_distance(current, target)
    for _ in range(10):
        rng.shuffle(current)
        assert shape_distance(current, target) == reference


def test_strided_dim_alone_is_never_distance_zero(conv2d):
    current = [
        DimDesc(s(conv2d, "C_in"), strided=True),
        DimDesc(s(conv2d, "H")),
        DimDesc(s(conv2d, "W")),
    ]
    assert shape_distance(current, conv2d.input_dims) >= 1


def build_tree(spec, d_max):
    """The complete unpruned step tree: (graph, parent index) rows,
    children after parents, no deduplication."""
    from opsmith.search import legal_steps

    nodes = [(root(spec), -1)]
    start = 0
    for depth in range(d_max):
        end = len(nodes)
        for i in range(start, end):
            g, _ = nodes[i]
            for step in legal_steps(g):
                nodes.append((apply(g, step), i))
        start = end
    return nodes


def shortest_completions(nodes):
    """Exact completion lengths within the tree's depth, by backward
    induction, plus the argmin child used to reconstruct a path."""
    from opsmith.pgraph import match_input

    best = [INF] * len(nodes)
    via = [-1] * len(nodes)
    for i in range(len(nodes) - 1, -1, -1):
        g, parent = nodes[i]
        if match_input(g) is not None:
            best[i] = 0
        if parent >= 0 and best[i] + 1 < best[parent]:
            best[parent] = best[i] + 1
            via[parent] = i
    return best, via


def test_distance_never_exceeds_true_completion_length(vec1d):
    """Admissibility against the exhaustive oracle: on every partial
    graph in the full unpruned tree, the distance is at most the true
    shortest completion length whenever one exists."""
    nodes = build_tree(vec1d, 4)
    best, _ = shortest_completions(nodes)
    checked = 0
    for i, (g, _) in enumerate(nodes):
        if best[i] == INF or best[i] == 0:
            continue
        assert graph_distance(g) <= best[i], (
            g.print_steps() if hasattr(g, "print_steps") else i,
            best[i],
        )
        checked += 1
    assert checked > 500


def test_shortest_completions_respect_step_count_conservation(vec1d):
    """Along any completion, merges minus splits equals the dim-count
    bookkeeping of the eliminated and created dims.  This is the
    aggregate form of the reshape counting argument behind the
    distance's per-group charges."""
    nodes = build_tree(vec1d, 4)
    best, via = shortest_completions(nodes)
    n_input = len(vec1d.input_dims)
    checked = 0
    for i, (g, _) in enumerate(nodes):
        if not 0 < best[i] < INF:
            continue
        j = i
        while best[j] > 0:
            j = via[j]
        end, _ = nodes[j]
        suffix = end.steps[len(g.steps):]
        merges = sum(1 for st in suffix if st.kind == "merge")
        splits = sum(1 for st in suffix if st.kind == "split")
        reduces = sum(1 for st in suffix if st.kind == "reduce")
        eliminated = sum(
            {"expand": 1, "unfold": 1}.get(st.kind, 0) for st in suffix
        ) + sum(
            sum(1 for m in st.modes if m == "weight")
            for st in suffix
            if st.kind == "contract"
        )
        assert merges - splits == n_input - len(g.dims) + eliminated - reduces
        checked += 1
    assert checked > 500
