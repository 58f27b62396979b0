"""Canonical-form filtering of construction steps.

Each legal step gets a verdict: canonical, or rejected with the id of
the rule that matched.  Rejection means an equivalent operator is
reachable some other way, so the search can skip this one.  The rules:

    contract-view        a contraction target is the output of a
                         one-to-one view (split, merge or shift);
                         canonical form applies views above the
                         contraction instead.  Unfold outputs stay
                         contractible (windowed weight access is real).
    expand-reduce        expand directly discarding a reduce-created
                         dim; the pair only rescales the output.
    unfold-double-reduce an unfold whose data and window dims are both
                         reduction-pure; at most one side may be.
    view-order           two consecutive view steps on disjoint dims
                         commute, so only the non-decreasing order by
                         (kind rank, least target, parameter) survives.
    <rewrite rule id>    the step's freshly built expressions are not
                         in normal form under the exact rules, or an
                         approximate rule fires (canonicality only;
                         disable with include_approx=False).

Verdicts are cached by the local context (target dim content, the
proposal, the previous step, stage flags), which enumeration revisits
heavily.  The view-order rule makes the judgment depend on the step
before, a deliberate relaxation of strict locality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .pgraph import PGraph, Step, apply, root
from .rewrite import default_rules, simplify

VIEW_RANK = {"split": 0, "merge": 1, "shift": 2, "expand": 3, "unfold": 4, "stride": 5}

# kinds whose application builds new compound expressions worth
# normal-form checking
_REWRITE_CHECKED = ("split", "merge", "shift", "stride", "unfold")


@dataclass(frozen=True)
class Verdict:
    ok: bool
    rule: Optional[str] = None


_OK = Verdict(True)


def _view_key(step: Step) -> tuple:
    return (VIEW_RANK[step.kind], min(step.targets), str(step.param or ""))


class Canonicalizer:
    """Stateful only through its verdict cache; judgments are pure."""

    def __init__(self, include_approx: bool = True):
        self.include_approx = include_approx
        self.rules = default_rules(include_approx)
        self._cache: dict = {}

    def check_step(self, parent: PGraph, step: Step, child: PGraph) -> Verdict:
        key = self._key(parent, step)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        verdict = self._judge(parent, step, child)
        self._cache[key] = verdict
        return verdict

    def _key(self, parent: PGraph, step: Step) -> tuple:
        targets = tuple(
            (d.expr, d.size, d.origin, d.reduce_pure, d.strided)
            for d in (parent.dim_by_ident(t) for t in step.targets)
        )
        prev: tuple = ()
        if parent.steps:
            last = parent.steps[-1]
            prev = (last.kind, last.targets, last.produced, str(last.param or ""))
        return (step.signature(), targets, prev, parent.after_contract)

    def _judge(self, parent: PGraph, step: Step, child: PGraph) -> Verdict:
        target_dims = [parent.dim_by_ident(t) for t in step.targets]

        if step.kind == "contract":
            for d in target_dims:
                if d.origin in ("split", "merge", "shift"):
                    return Verdict(False, "contract-view")

        if step.kind == "expand" and target_dims[0].origin == "reduce":
            return Verdict(False, "expand-reduce")

        if step.kind == "unfold" and all(d.reduce_pure for d in target_dims):
            return Verdict(False, "unfold-double-reduce")

        if parent.steps and step.kind in VIEW_RANK:
            last = parent.steps[-1]
            if last.kind in VIEW_RANK:
                touched = set(last.targets) | set(last.produced)
                if not touched & set(step.targets):
                    if _view_key(step) < _view_key(last):
                        return Verdict(False, "view-order")

        if step.kind in _REWRITE_CHECKED:
            born = len(parent.steps)
            fresh = [d.expr for d in child.dims if d.origin_step == born]
            if fresh:
                _, fired = simplify(fresh, self.rules)
                if fired:
                    return Verdict(False, fired[0])

        return _OK


def check_operator(graph: PGraph, include_approx: bool = True) -> list[tuple[Step, Verdict]]:
    """Replay a graph from its spec, judging every step."""
    canon = Canonicalizer(include_approx)
    current = root(graph.spec)
    out = []
    for st in graph.steps:
        child = apply(current, st)
        out.append((st, canon.check_step(current, st, child)))
        current = child
    return out
