"""Monte Carlo tree search over partial operator graphs.

The state space is the set of partial graphs; actions are canonical
primitive applications plus a finalize action wherever the frontier
already matches the input shape.  Shape distance prunes children that
cannot finish inside the remaining step budget: a child at depth d is
viable only while ``distance <= d_max - d``, which keeps the boundary
cases (distance 0 with no steps left, distance equal to the remainder)
alive.

Selection is UCT with an exploration constant of sqrt(2) by default.
Rollouts pick uniformly among the viable actions and stop at the first
finalize, or report a dead end when nothing is viable.  Both expansion
and rollout sample by rejection: draw a candidate step uniformly, then
apply and validate just that one.  The first valid element of a random
permutation is uniform over the valid subset, so the policy is exactly
the same as materializing every child, at a fraction of the applies.
Rewards are clipped to [0, 1]; completions that blow a FLOPs or
parameter cap are logged with reward zero.  A reward backend failure
logs the sample as failed and then propagates, so the orchestrator
decides whether the run continues.

Sample logs are append-only lines of the form::

    sample id=3 iter=17 seed=9 reward=0.5 flops=1024 params=16 status=ok op=op{...}

The iteration index doubles as the record's timestamp.  Wall-clock
times would break the determinism contract (equal seeds must produce
byte-identical logs), so the log carries logical time only.

Multiple workers may share one tree: node statistics are guarded by
the tree lock and selection charges a virtual loss so concurrent
walkers spread out.  Reward evaluation runs outside the lock.
Determinism is only promised for single-worker runs.
"""

from __future__ import annotations

import math
import random
import re
import threading
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

from .canon import Canonicalizer, check_operator
from .pgraph import (
    BudgetExceeded,
    PGraph,
    ProblemSpec,
    Step,
    apply,
    check_budgets,
    end_reductions,
    enumerate_children,
    match_input,
    print_steps,
    root,
    weight_count,
)
from .codegen import flops as graph_flops
from .shapedist import graph_distance


class RewardFailure(Exception):
    """The reward backend did not produce a usable reward."""


def has_matching_shape(graph: PGraph) -> bool:
    return match_input(graph) is not None


def legal_steps(graph: PGraph) -> list[Step]:
    """Every primitive application legal right now.

    The child enumerator is staged: while the reduction phase is open
    it proposes only reduces.  Leaving that phase is free and implicit
    (applying any non-reduce step ends it), so the search considers
    both phases' moves side by side.
    """
    steps = enumerate_children(graph)
    if graph.in_reduction:
        steps = steps + enumerate_children(end_reductions(graph))
    return steps


# ---------------------------------------------------------------------------
# Budgets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Budget:
    """Hard limits the search enforces.

    ``d_max`` bounds the primitive count; the caps are evaluated under
    the spec's reference assignment.  Expand/Stride occurrence limits
    ride along so one object describes the whole constraint set.
    """

    d_max: int
    flops_cap: Optional[int] = None
    params_cap: Optional[int] = None
    max_expand: int = 2
    max_stride: int = 2

    def __post_init__(self) -> None:
        for name in ("d_max", "flops_cap", "params_cap", "max_expand", "max_stride"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"budget {name} must be nonnegative, got {v}")

    @staticmethod
    def from_spec(spec: ProblemSpec) -> "Budget":
        return Budget(
            d_max=spec.max_depth,
            flops_cap=spec.flops_cap,
            params_cap=spec.params_cap,
            max_expand=spec.max_expand,
            max_stride=spec.max_stride,
        )

    def applied_to(self, spec: ProblemSpec) -> ProblemSpec:
        """The spec with this budget's limits substituted in."""
        return replace(
            spec,
            max_depth=self.d_max,
            flops_cap=self.flops_cap,
            params_cap=self.params_cap,
            max_expand=self.max_expand,
            max_stride=self.max_stride,
        )


def prune(graph: PGraph, budget: Budget) -> bool:
    """True when the graph cannot finish within the remaining steps.

    Two cheap screens run before the full distance: every strided dim
    costs at least one step to repair or retire, and a graph with no
    budget left must match the input outright.
    """
    remaining = budget.d_max - graph.depth
    if remaining < 0:
        return True
    if sum(1 for d in graph.dims if d.strided) > remaining:
        return True
    if remaining == 0:
        return match_input(graph) is None
    return graph_distance(graph) > remaining


# ---------------------------------------------------------------------------
# Sample records and the log format
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    iteration: int  # logical timestamp
    seed: int
    reward: float
    flops: int
    params: int
    status: str  # "ok" | "over_budget" | "failed"
    op: str  # serialized step sequence

    def line(self) -> str:
        return (
            f"sample id={self.sample_id} iter={self.iteration} seed={self.seed} "
            f"reward={self.reward!r} flops={self.flops} params={self.params} "
            f"status={self.status} op={self.op}"
        )


_LINE_RE = re.compile(
    r"^sample id=(?P<id>\d+) iter=(?P<iter>\d+) seed=(?P<seed>-?\d+) "
    r"reward=(?P<reward>\S+) flops=(?P<flops>\d+) params=(?P<params>\d+) "
    r"status=(?P<status>\w+)$"
)


def parse_record(line: str) -> SampleRecord:
    head, sep, op = line.rstrip("\n").partition(" op=")
    m = _LINE_RE.match(head)
    if not m or not sep:
        raise ValueError(f"bad sample line: {line!r}")
    return SampleRecord(
        sample_id=int(m.group("id")),
        iteration=int(m.group("iter")),
        seed=int(m.group("seed")),
        reward=float(m.group("reward")),
        flops=int(m.group("flops")),
        params=int(m.group("params")),
        status=m.group("status"),
        op=op,
    )


def load_log(path) -> list[SampleRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(parse_record(line))
    return records


def next_sample_id(records: Iterable[SampleRecord]) -> int:
    """Resume point: one past the largest id seen."""
    top = -1
    for r in records:
        top = max(top, r.sample_id)
    return top + 1


def top_k(
    records: Iterable[SampleRecord],
    k: int,
    flops_cap: Optional[int] = None,
    params_cap: Optional[int] = None,
) -> list[SampleRecord]:
    """Best k by reward among records that pass the filters."""
    kept = [
        r
        for r in records
        if r.status == "ok"
        and (flops_cap is None or r.flops <= flops_cap)
        and (params_cap is None or r.params <= params_cap)
    ]
    kept.sort(key=lambda r: (-r.reward, r.sample_id))
    return kept[:k]


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------

FINALIZE = Step(kind="finalize")


class SearchNode:
    """One partial graph in the tree (or a finalized operator)."""

    __slots__ = (
        "graph", "complete", "visits", "total_reward", "virtual",
        "children", "untried", "terminal", "reward_cache",
    )

    def __init__(self, graph: PGraph, complete: bool = False) -> None:
        self.graph = graph
        self.complete = complete
        self.visits = 0
        self.total_reward = 0.0
        self.virtual = 0
        self.children: dict[tuple, SearchNode] = {}
        # candidate steps not yet tried, unvalidated; rejects are
        # discarded for good as they are drawn
        self.untried: Optional[list[Step]] = None
        self.terminal = False
        self.reward_cache: Optional[SampleRecord] = None

    @property
    def depth(self) -> int:
        return self.graph.depth


class SearchTree:
    """Shared search state: root, budget, canonicalizer, statistics."""

    def __init__(
        self,
        spec: ProblemSpec,
        budget: Optional[Budget] = None,
        seed: int = 0,
        exploration: float = math.sqrt(2.0),
        use_distance: bool = True,
        use_canon: bool = True,
        include_approx: bool = True,
        next_id: int = 0,
    ) -> None:
        self.budget = budget if budget is not None else Budget.from_spec(spec)
        self.spec = self.budget.applied_to(spec)
        self.seed = seed
        self.exploration = exploration
        self.use_distance = use_distance
        self.use_canon = use_canon
        self.canon = Canonicalizer(include_approx=include_approx)
        self.root = SearchNode(root(self.spec))
        self.lock = threading.Lock()
        self.iteration = 0
        self.next_id = next_id

    # -- actions -----------------------------------------------------------

    def candidate_steps(self, graph: PGraph) -> list[Step]:
        """Unvalidated moves from a graph: finalize where the frontier
        already matches, primitive applications below the depth cap."""
        steps: list[Step] = []
        if match_input(graph) is not None:
            steps.append(FINALIZE)
        if graph.depth < self.budget.d_max:
            steps.extend(legal_steps(graph))
        return steps

    def admit(self, graph: PGraph, step: Step) -> Optional[PGraph]:
        """Apply one candidate step; None when the child is rejected as
        non-canonical or unable to finish in the remaining depth.

        The distance screen runs first: it is much cheaper than the
        rewrite-backed canonicality judgment and rejects more children
        at depth.  The kept set is the same either way.
        """
        child = apply(graph, step)
        if self.use_distance and prune(child, self.budget):
            return None
        if self.use_canon and not self.canon.check_step(
            graph, child.steps[-1], child
        ).ok:
            return None
        return child

    def viable_actions(self, graph: PGraph) -> list[tuple[Step, Optional[PGraph]]]:
        """Canonical, unpruned moves from a graph, plus finalize.

        Finalize carries no child graph; every other action comes with
        the already-applied child so callers do not redo the work.
        """
        actions: list[tuple[Step, Optional[PGraph]]] = []
        for step in self.candidate_steps(graph):
            if step.kind == "finalize":
                actions.append((FINALIZE, None))
                continue
            child = self.admit(graph, step)
            if child is not None:
                actions.append((child.steps[-1], child))
        return actions


def _uct_score(parent: SearchNode, child: SearchNode, c: float) -> float:
    n = child.visits + child.virtual
    if n == 0:
        return float("inf")
    total = parent.visits + parent.virtual
    mean = child.total_reward / n
    return mean + c * math.sqrt(math.log(max(total, 1)) / n)


def _score_completion(graph: PGraph) -> tuple[int, int, bool]:
    """FLOPs and parameter count, and whether they fit the budget."""
    fl = graph_flops(graph)
    params = weight_count(graph)
    within = True
    try:
        check_budgets(graph, flops=fl)
    except BudgetExceeded:
        within = False
    return fl, params, within


def mcts_step(
    tree: SearchTree,
    reward_fn: Callable[[PGraph], float],
    rng,
) -> Optional[SampleRecord]:
    """One select-expand-rollout-backpropagate iteration.

    ``rng`` is a numpy Generator.  Returns the sample logged this
    iteration, or None when the iteration ended at a dead end or at an
    operator scored earlier.  Raises RewardFailure after logging the
    failed sample; the record rides on the exception as ``.record``.
    """
    with tree.lock:
        tree.iteration += 1
        iteration = tree.iteration
        path = [tree.root]
        tree.root.virtual += 1
        node = tree.root
        expanded = False

        # Selection: expand an untried action when one survives
        # validation, otherwise descend by UCT.
        while not node.complete and not node.terminal:
            if node.untried is None:
                node.untried = tree.candidate_steps(node.graph)
            child = _expand(tree, node, rng)
            if child is not None:
                child.virtual += 1
                path.append(child)
                node = child
                expanded = True
                break
            if not node.children:
                node.terminal = True
                break
            node = max(
                node.children.values(),
                key=lambda ch: _uct_score(path[-1], ch, tree.exploration),
            )
            node.virtual += 1
            path.append(node)

        if node.terminal:
            _backpropagate(path, 0.0)
            return None

        if node.complete and not expanded and node.reward_cache is not None:
            _backpropagate(path, node.reward_cache.reward)
            return None

    # Rollout and reward evaluation run outside the lock.
    if node.complete:
        completed: Optional[PGraph] = node.graph
    else:
        g = node.graph
        completed = None
        while True:
            step, child_graph = _sample_action(tree, g, rng)
            if step is None:
                break
            if step.kind == "finalize":
                completed = g
                break
            g = child_graph

    if completed is None:
        with tree.lock:
            _backpropagate(path, 0.0)
        return None

    fl, params, within = _score_completion(completed)
    status = "ok"
    reward = 0.0
    failure: Optional[RewardFailure] = None
    if not within:
        status = "over_budget"
    else:
        try:
            reward = min(1.0, max(0.0, float(reward_fn(completed))))
        except RewardFailure as exc:
            status = "failed"
            failure = exc

    with tree.lock:
        record = SampleRecord(
            sample_id=tree.next_id,
            iteration=iteration,
            seed=tree.seed,
            reward=reward,
            flops=fl,
            params=params,
            status=status,
            op=print_steps(completed),
        )
        tree.next_id += 1
        if node.complete and node.reward_cache is None:
            node.reward_cache = record
        _backpropagate(path, reward)
    if failure is not None:
        failure.record = record  # type: ignore[attr-defined]
        raise failure
    return record


def _expand(tree: SearchTree, node: SearchNode, rng) -> Optional[SearchNode]:
    """Draw untried steps until one yields a viable child; None once the
    node is out of candidates.  Rejected draws are dropped for good."""
    while node.untried:
        pick = int(rng.integers(len(node.untried)))
        step = node.untried.pop(pick)
        if step.kind == "finalize":
            child = SearchNode(node.graph, complete=True)
        else:
            graph = tree.admit(node.graph, step)
            if graph is None:
                continue
            child = SearchNode(graph)
        node.children[step.signature()] = child
        return child
    return None


def _sample_action(
    tree: SearchTree, graph: PGraph, rng
) -> tuple[Optional[Step], Optional[PGraph]]:
    """Uniform draw from the viable actions, by rejection.

    (None, None) signals a dead end; (FINALIZE, None) says the graph
    itself is the completed operator.
    """
    candidates = tree.candidate_steps(graph)
    while candidates:
        pick = int(rng.integers(len(candidates)))
        step = candidates.pop(pick)
        if step.kind == "finalize":
            return FINALIZE, None
        child = tree.admit(graph, step)
        if child is not None:
            return step, child
    return None, None


def _backpropagate(path: Sequence[SearchNode], reward: float) -> None:
    for n in path:
        n.virtual -= 1
        n.visits += 1
        n.total_reward += reward


# ---------------------------------------------------------------------------
# Exhaustive enumeration
# ---------------------------------------------------------------------------

def enumerate_exhaustive(
    spec: ProblemSpec,
    budget: Optional[Budget] = None,
    use_distance: bool = True,
    include_approx: bool = True,
    canonical_only: bool = True,
) -> list[PGraph]:
    """Every complete graph within the budgets, deduplicated.

    Depth-first over the (by default canonical) child relation; with
    ``use_distance`` the walk skips children that cannot finish in the
    remaining depth, which must never change the result set.  Budget
    caps are checked on completed graphs.
    """
    budget = budget if budget is not None else Budget.from_spec(spec)
    spec = budget.applied_to(spec)
    canon = Canonicalizer(include_approx=include_approx)
    seen: set[str] = set()
    out: list[PGraph] = []

    def visit(graph: PGraph) -> None:
        if match_input(graph) is not None:
            key = print_steps(graph)
            if key not in seen:
                seen.add(key)
                try:
                    check_budgets(graph, flops=graph_flops(graph))
                    out.append(graph)
                except BudgetExceeded:
                    pass
        if graph.depth >= budget.d_max:
            return
        for step in legal_steps(graph):
            child = apply(graph, step)
            if canonical_only and not canon.check_step(
                graph, child.steps[-1], child
            ).ok:
                continue
            if use_distance and prune(child, budget):
                continue
            visit(child)

    visit(root(spec))
    return out


# ---------------------------------------------------------------------------
# Uniform random completion (the pruning ablation's baseline)
# ---------------------------------------------------------------------------

def random_completion(
    tree: SearchTree,
    rng,
) -> Optional[PGraph]:
    """One uniform rollout from the root, no tree statistics involved."""
    g = tree.root.graph
    while True:
        step, child = _sample_action(tree, g, rng)
        if step is None:
            return None
        if step.kind == "finalize":
            return g
        g = child


@dataclass(frozen=True)
class TrialStats:
    """Outcome tally of a batch of guidance-free walks."""

    trials: int
    matched: int
    valid: int
    valid_ops: tuple[str, ...] = ()


def uniform_trials(
    spec: ProblemSpec,
    budget: Optional[Budget] = None,
    trials: int = 1000,
    seed: int = 0,
    include_approx: bool = True,
) -> TrialStats:
    """The pruning ablation's baseline: walks with no guidance at all.

    Each trial applies uniformly random legal steps until the depth cap
    or a dead end, with neither the distance screen nor canonicality
    steering the draw.  A trial counts as *matched* when the final
    frontier matches the input shape, and as *valid* when the search
    would actually accept the result: matched, canonical at every step,
    and within the budget caps.  Matching alone is rare but real;
    matching AND canonical is what guided sampling delivers and blind
    sampling essentially never does.

    The first two levels of the walk tree repeat across trials, so
    their step lists and children are memoized (read-only; the draw
    distribution is unchanged).  Deterministic for a given seed.
    """
    budget = budget if budget is not None else Budget.from_spec(spec)
    spec = budget.applied_to(spec)
    rnd = random.Random(seed)
    g0 = root(spec)
    d_max = budget.d_max
    step_lists: dict[tuple, list[Step]] = {(): legal_steps(g0)}
    child_memo: dict[tuple, PGraph] = {}
    matched = 0
    valid_ops: list[str] = []

    for _ in range(trials):
        g = g0
        path: tuple = ()
        for depth in range(d_max):
            if depth <= 1:
                steps = step_lists.get(path)
                if steps is None:
                    steps = legal_steps(g)
                    step_lists[path] = steps
            else:
                steps = legal_steps(g)
            if not steps:
                g = None
                break
            pick = rnd.randrange(len(steps))
            if depth <= 1:
                path = path + (pick,)
                child = child_memo.get(path)
                if child is None:
                    child = apply(g, steps[pick])
                    child_memo[path] = child
                g = child
            else:
                g = apply(g, steps[pick])
        if g is None or match_input(g) is None:
            continue
        matched += 1
        if not all(v.ok for _, v in check_operator(g, include_approx)):
            continue
        try:
            check_budgets(g, flops=graph_flops(g))
        except BudgetExceeded:
            continue
        valid_ops.append(print_steps(g))

    return TrialStats(trials, matched, len(valid_ops), tuple(valid_ops))
