"""Reward backends for the operator search.

The search only needs a callable from a complete graph to a scalar in
[0, 1].  Two backends are provided: a built-in least-squares fit that
scores how well the candidate can imitate a fixed target operator on
random inputs, and an external command speaking a one-line protocol,
standing in for a real trainer.

The fit exploits that an operator's output is linear in each weight
tensor separately (weights enter the compute stage as plain factors).
Each tensor is solved by a matrix-free least-squares pass, alternating
over tensors when there are several, with the forward map evaluated by
``interpret`` and its adjoint by ``weight_gradient``.
"""

from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from .codegen import (
    input_shape,
    interpret,
    random_weights,
    weight_gradient,
    weight_shapes,
)
from .pgraph import PGraph, ProblemSpec, parse_steps, print_operator
from .search import RewardFailure


@dataclass(frozen=True)
class RewardReport:
    """A clipped scalar reward plus free-form diagnostics."""

    reward: float
    diagnostics: tuple[tuple[str, str], ...] = ()

    def diag(self, key: str) -> Optional[str]:
        for k, v in self.diagnostics:
            if k == key:
                return v
        return None


def _clip(value: float) -> float:
    if not math.isfinite(value):
        return 0.0
    return min(1.0, max(0.0, value))


# ---------------------------------------------------------------------------
# Built-in fit reward
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FitTarget:
    """Frozen regression problem: inputs and the outputs to imitate."""

    xs: tuple[np.ndarray, ...]
    ys: tuple[np.ndarray, ...]
    norm: float
    label: str


def fit_target(
    spec: ProblemSpec,
    op_text: str,
    seed: int = 0,
    samples: int = 2,
    assignment: Optional[Mapping[str, int]] = None,
) -> FitTarget:
    """Evaluate a target operator on seeded random inputs.

    The target is given as serialized steps over the same spec; its
    weights are drawn once from the seed, so the whole regression
    problem is a pure function of (spec, text, seed, samples).
    """
    target = parse_steps(op_text, spec)
    rng = np.random.default_rng(seed)
    tw = random_weights(target, rng, assignment)
    shape = input_shape(spec, assignment)
    xs = tuple(rng.standard_normal(shape) for _ in range(samples))
    ys = tuple(interpret(target, x, tw, assignment) for x in xs)
    norm = float(sum(np.sum(y * y) for y in ys))
    return FitTarget(xs=xs, ys=ys, norm=norm, label=op_text)


def _forward(graph, xs, weights, assignment):
    return [interpret(graph, x, weights, assignment) for x in xs]


def _solve_weight(graph, target, weights, index, assignment):
    """Least-squares update of one weight tensor, the others fixed.

    The output is linear in this tensor, so the forward map is a
    LinearOperator; lsqr keeps everything matrix-free.
    """
    shape = weights[index].shape
    n = int(np.prod(shape)) if shape else 1
    m = sum(y.size for y in target.ys)

    def matvec(v):
        trial = list(weights)
        trial[index] = np.asarray(v, dtype=np.float64).reshape(shape)
        outs = _forward(graph, target.xs, trial, assignment)
        return np.concatenate([o.ravel() for o in outs])

    def rmatvec(u):
        grad = np.zeros(n)
        offset = 0
        for x, y in zip(target.xs, target.ys):
            piece = np.asarray(u[offset:offset + y.size]).reshape(y.shape)
            offset += y.size
            grad += weight_gradient(graph, x, piece, weights, assignment)[
                index
            ].ravel()
        return grad

    op = LinearOperator((m, n), matvec=matvec, rmatvec=rmatvec)
    rhs = np.concatenate([y.ravel() for y in target.ys])
    solution = lsqr(op, rhs, atol=1e-10, btol=1e-10, iter_lim=max(2 * n, 40))[0]
    updated = list(weights)
    updated[index] = solution.reshape(shape)
    return updated


def builtin_fit_reward(
    graph: PGraph,
    target: FitTarget,
    seed: int = 0,
    sweeps: int = 2,
    assignment: Optional[Mapping[str, int]] = None,
) -> RewardReport:
    """Fit the candidate's weights to the target, reward exp(-residual).

    The residual is relative to the target's own energy, so an exact
    imitation scores 1.0 and a zero output scores exp(-1).  Fits that
    go non-finite (a singular or overflowing solve) score 0 with a
    diagnostic instead of raising.
    """
    shapes = weight_shapes(graph, assignment)
    if not shapes:
        weights: list[np.ndarray] = []
    else:
        weights = random_weights(graph, np.random.default_rng(seed + 1), assignment)
        for sweep in range(sweeps if len(shapes) > 1 else 1):
            for index in range(len(shapes)):
                weights = _solve_weight(graph, target, weights, index, assignment)

    outs = _forward(graph, target.xs, weights, assignment)
    residual = float(
        sum(np.sum((o - y) ** 2) for o, y in zip(outs, target.ys))
    )
    if not math.isfinite(residual):
        return RewardReport(0.0, (("error", "singular fit"),))
    norm = target.norm if target.norm > 0 else 1.0
    reward = _clip(math.exp(-residual / norm))
    return RewardReport(
        reward,
        (
            ("residual", repr(residual)),
            ("target_norm", repr(target.norm)),
            ("weights", str(len(shapes))),
        ),
    )


# ---------------------------------------------------------------------------
# External command reward
# ---------------------------------------------------------------------------

def external_reward(
    graph: PGraph,
    command: Union[str, Sequence[str]],
    timeout: float = 10.0,
) -> RewardReport:
    """Score an operator through a child process.

    The serialized operator document goes to the child's stdin; the
    child must print one line ``reward <float>``, plus any number of
    ``diag <key> <value>`` lines.  Timeouts, nonzero exits, and
    unparseable output raise RewardFailure.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    doc = print_operator(graph)
    try:
        proc = subprocess.run(
            argv,
            input=doc.encode(),
            capture_output=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        raise RewardFailure(f"reward command timed out after {timeout}s")
    except OSError as exc:
        raise RewardFailure(f"reward command failed to start: {exc}")
    if proc.returncode != 0:
        raise RewardFailure(
            f"reward command exited {proc.returncode}: "
            f"{proc.stderr.decode(errors='replace').strip()}"
        )
    reward: Optional[float] = None
    diags: list[tuple[str, str]] = []
    for line in proc.stdout.decode(errors="replace").splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] == "reward":
            try:
                reward = float(parts[1])
            except ValueError:
                raise RewardFailure(f"bad reward line: {line!r}")
        elif len(parts) >= 3 and parts[0] == "diag":
            diags.append((parts[1], " ".join(parts[2:])))
    if reward is None or not math.isfinite(reward):
        raise RewardFailure("reward command produced no usable reward line")
    return RewardReport(_clip(reward), tuple(diags))


# ---------------------------------------------------------------------------
# Search plumbing
# ---------------------------------------------------------------------------

def make_reward_fn(
    backend: Callable[[PGraph], RewardReport]
) -> Callable[[PGraph], float]:
    """Adapt a report-producing backend to the search's scalar hook,
    memoizing by serialized steps so re-visited operators are free."""
    from .pgraph import print_steps

    memo: dict[str, float] = {}

    def reward_fn(graph: PGraph) -> float:
        key = print_steps(graph)
        hit = memo.get(key)
        if hit is None:
            hit = backend(graph).reward
            memo[key] = hit
        return hit

    return reward_fn
