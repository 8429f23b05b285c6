"""Assignment search over the formulation kernels.

Strategies: chunked exhaustive enumeration (lexicographic tie-break),
depth-first branch-and-bound with an admissible box relaxation of the
transformer-spread objective (separable models only), and seeded
best-improvement local search. On top of those, an iterated fixed-voltage
refinement re-solves the discrete problem while updating the frozen
voltage profile, and a cyclic coordinate descent tunes continuous
reactive adjustments after the discrete search. Every outcome carries
both the model view and an exact power-flow verification of the chosen
and initial assignments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .formulations import (
    AffineFit,
    EvaluationResult,
    _make_kernel,
    evaluate_exact,
    evaluate_fixv,
    evaluate_lbfm,
    evaluate_linv,
)
from .netmodel import CaseSnapshot
from .powerflow import PhaseAssignment, solve_utpf

__all__ = [
    "Algorithm1Options",
    "Algorithm1Step",
    "OptimizationOutcome",
    "SearchOptions",
    "branch_and_bound",
    "exhaustive",
    "fixv_algorithm1",
    "local_search",
    "optimize_pv_q",
]

_BOUND_MARGIN = 1e-10


@dataclass(frozen=True)
class SearchOptions:
    """Knobs shared by the discrete search strategies."""

    strategy: str = "auto"  # auto | exhaustive | branch-and-bound | local
    enumeration_budget: int = 3**12  # candidate cap for exhaustive/auto
    chunk: int = 6561  # candidates scored per batch
    restarts: int = 3  # random local-search starts beyond the initial point
    max_sweeps: int = 60  # best-improvement passes per start
    seed: int = 7

    def __post_init__(self) -> None:
        if self.strategy not in ("auto", "exhaustive", "branch-and-bound", "local"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if min(self.enumeration_budget, self.chunk, self.max_sweeps) < 1:
            raise ValueError("budgets must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")


@dataclass(frozen=True)
class Algorithm1Options:
    """Iterated fixed-voltage refinement controls."""

    max_outer: int = 3  # discrete solves allowed (K)
    eps_v: float = 1e-4  # stop once the profile moves less than this
    warm_start: bool = False  # start from the exact initial-assignment profile
    seed_next_search: bool = True  # reuse the previous best as a local-search start

    def __post_init__(self) -> None:
        if self.max_outer < 1:
            raise ValueError("need at least one outer solve")
        if self.eps_v <= 0:
            raise ValueError("eps_v must be positive")


@dataclass(frozen=True)
class Algorithm1Step:
    """One outer iteration: assignment chosen and profile movement."""

    outer: int
    phases: tuple[int, ...]
    delta_v: float
    model_objective: float


@dataclass(frozen=True, eq=False)
class OptimizationOutcome:
    """Chosen assignment with model-view and exact-verification results."""

    method: str
    strategy: str
    assignment: PhaseAssignment
    model: EvaluationResult
    initial_model: EvaluationResult
    verified: EvaluationResult
    initial_verified: EvaluationResult
    candidates: int
    trace: tuple[Algorithm1Step, ...] = ()
    stats: Mapping[str, float] = field(default_factory=dict)
    q_adjust: np.ndarray | None = None

    @property
    def objective(self) -> float:
        return self.model.objective


def _model_evaluator(
    method: str,
    profile: np.ndarray | None,
    fit: AffineFit | None,
) -> Callable[[CaseSnapshot, PhaseAssignment, np.ndarray | None], EvaluationResult]:
    if method == "fixv":
        return lambda snap, asg, q: evaluate_fixv(snap, asg, profile=profile, q_adjust=q)
    if method == "linv":
        return lambda snap, asg, q: evaluate_linv(snap, asg, fit=fit, q_adjust=q)
    if method == "lbfm":
        return lambda snap, asg, q: evaluate_lbfm(snap, asg, q_adjust=q)
    if method == "utpf":
        return lambda snap, asg, q: evaluate_exact(snap, asg, q_adjust=q)
    raise ValueError(f"unknown formulation {method!r}")


def _decode(indices: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros((len(indices), 0), dtype=np.int64)
    digits = np.unravel_index(indices, (3,) * width)
    return np.stack(digits, axis=1).astype(np.int64)


def _finish(
    snapshot: CaseSnapshot,
    method: str,
    strategy: str,
    best_choices: np.ndarray,
    movable: np.ndarray,
    candidates: int,
    stats: Mapping[str, float],
    profile: np.ndarray | None,
    fit: AffineFit | None,
    q_adjust: np.ndarray | None,
    trace: tuple[Algorithm1Step, ...] = (),
) -> OptimizationOutcome:
    network = snapshot.network
    initial = PhaseAssignment.initial(network)
    phases = list(initial.phases)
    for pos, ph in zip(movable, best_choices):
        phases[pos] = int(ph)
    chosen = PhaseAssignment(tuple(phases))

    evaluator = _model_evaluator(method, profile, fit)
    model = evaluator(snapshot, chosen, q_adjust)
    initial_model = evaluator(snapshot, initial, q_adjust)
    if model.objective > initial_model.objective:
        # Never return anything the scoring model ranks below the status quo.
        chosen, model = initial, initial_model
        stats = dict(stats, fell_back_to_initial=1.0)

    verified = evaluate_exact(snapshot, chosen, q_adjust=q_adjust)
    initial_verified = (
        verified
        if chosen.phases == initial.phases
        else evaluate_exact(snapshot, initial, q_adjust=q_adjust)
    )
    return OptimizationOutcome(
        method=method,
        strategy=strategy,
        assignment=chosen,
        model=model,
        initial_model=initial_model,
        verified=verified,
        initial_verified=initial_verified,
        candidates=candidates,
        trace=trace,
        stats=dict(stats),
        q_adjust=None if q_adjust is None else np.asarray(q_adjust, dtype=float),
    )


def _exhaustive_choices(kernel, options: SearchOptions) -> tuple[np.ndarray, int]:
    mm = kernel.n_movable
    total = 3**mm
    if total > options.enumeration_budget:
        raise ValueError(
            f"3^{mm} = {total} candidates exceed the enumeration budget "
            f"{options.enumeration_budget}; use local search or raise the budget"
        )
    best_f = math.inf
    best_idx = 0
    for lo in range(0, total, options.chunk):
        idx = np.arange(lo, min(lo + options.chunk, total))
        score = kernel.score(_decode(idx, mm))
        i = int(np.argmin(score.objective))
        if score.objective[i] < best_f:
            best_f = float(score.objective[i])
            best_idx = lo + i
    return _decode(np.array([best_idx]), mm)[0], total


def exhaustive(
    snapshot: CaseSnapshot,
    method: str = "fixv",
    profile: np.ndarray | None = None,
    fit: AffineFit | None = None,
    q_adjust: np.ndarray | None = None,
    options: SearchOptions | None = None,
) -> OptimizationOutcome:
    """Score every assignment of the adjustable customers; ties break toward
    the lexicographically smallest phase tuple."""

    options = options or SearchOptions()
    kernel = _make_kernel(snapshot, method, profile=profile, fit=fit, q_adjust=q_adjust)
    best, total = _exhaustive_choices(kernel, options)
    return _finish(
        snapshot, method, "exhaustive", best, kernel.movable, total,
        {}, profile, fit, q_adjust,
    )


def _largest_anchor(lo: np.ndarray, t_hi: float) -> float:
    """Largest a with sum(max(lo, a)) <= t_hi (piecewise-linear ramp)."""

    l1, l2, l3 = np.sort(lo)
    if t_hi < l1 + l2 + l3:
        return -math.inf
    a = t_hi / 3.0
    if a >= l3:
        return a
    a = (t_hi - l3) / 2.0
    if a >= l2:
        return a
    return t_hi - l2 - l3


def _smallest_reach(up: np.ndarray, t_lo: float) -> float:
    """Smallest x with sum(min(up, x)) >= t_lo (piecewise-linear ramp)."""

    u1, u2, u3 = np.sort(up)
    x = t_lo / 3.0
    if x <= u1:
        return x
    x = (t_lo - u1) / 2.0
    if x <= u2:
        return x
    x = t_lo - u1 - u2
    if x <= u3:
        return x
    return math.inf


def _min_window(lo: np.ndarray, up: np.ndarray, t_lo: float, t_hi: float) -> float:
    """Smallest spread max(x) - min(x) over x in the box [lo, up] with
    sum(x) in [t_lo, t_hi]; a lower bound for any discrete completion."""

    lmax, umin = float(lo.max()), float(up.min())
    a_cap = min(umin, _largest_anchor(lo, t_hi))
    a_floor = _smallest_reach(up, t_lo)

    def feasible(w: float) -> bool:
        # The window [a, a+w] must overlap every [lo_i, up_i] (a in
        # [lmax - w, umin]) while the clipped box's sum range, monotone in a,
        # still meets [t_lo, t_hi]: a <= a_cap and a + w >= a_floor.
        return max(lmax - w, a_floor - w) <= a_cap + 1e-15

    hi_w = float(up.max() - lo.min())
    if feasible(0.0):
        return 0.0
    if not feasible(hi_w):
        return 0.0  # inconsistent inputs; fall back to a trivial bound
    wa, wb = 0.0, hi_w
    for _ in range(60):
        mid = 0.5 * (wa + wb)
        if feasible(mid):
            wb = mid
        else:
            wa = mid
    return wa  # infeasible side: a certified lower bound on the true spread


def branch_and_bound(
    snapshot: CaseSnapshot,
    method: str = "fixv",
    profile: np.ndarray | None = None,
    fit: AffineFit | None = None,
    q_adjust: np.ndarray | None = None,
    options: SearchOptions | None = None,
) -> OptimizationOutcome:
    """Depth-first search with an admissible transformer-spread bound.

    Produces exactly the exhaustive result, including the lexicographic
    tie-break: nodes expand in phase order, the incumbent only improves
    strictly, and subtrees are pruned only when their bound proves every
    leaf strictly worse than the incumbent. Requires a separable model
    (fixed-voltage or branch-flow)."""

    options = options or SearchOptions()
    kernel = _make_kernel(snapshot, method, profile=profile, fit=fit, q_adjust=q_adjust)
    if not getattr(kernel, "separable", False):
        raise ValueError(
            "branch-and-bound needs separable per-customer effects; "
            f"{method!r} must use exhaustive or local search"
        )
    mm = kernel.n_movable
    ds = kernel.ds_choice  # (mm, 3) complex: value landing on the chosen phase
    s_base = kernel.s_base

    # Suffix envelopes over the still-free customers, per transformer phase.
    def suffix(parts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        lo_phase = np.zeros((mm + 1, 3))
        hi_phase = np.zeros((mm + 1, 3))
        lo_sum = np.zeros(mm + 1)
        hi_sum = np.zeros(mm + 1)
        for d in range(mm - 1, -1, -1):
            lo_phase[d] = lo_phase[d + 1] + np.minimum(0.0, parts[d])
            hi_phase[d] = hi_phase[d + 1] + np.maximum(0.0, parts[d])
            lo_sum[d] = lo_sum[d + 1] + parts[d].min()
            hi_sum[d] = hi_sum[d + 1] + parts[d].max()
        return lo_phase, hi_phase, lo_sum, hi_sum

    p_lo, p_hi, p_slo, p_shi = suffix(ds.real)
    q_lo, q_hi, q_slo, q_shi = suffix(ds.imag)

    best_f = math.inf
    best = np.zeros(mm, dtype=np.int64)
    nodes = leaves = pruned = 0
    path = np.zeros(mm, dtype=np.int64)

    def bound(depth: int, s_part: np.ndarray) -> float:
        wp = _min_window(
            s_part.real + p_lo[depth], s_part.real + p_hi[depth],
            float(s_part.real.sum() + p_slo[depth]),
            float(s_part.real.sum() + p_shi[depth]),
        )
        wq = _min_window(
            s_part.imag + q_lo[depth], s_part.imag + q_hi[depth],
            float(s_part.imag.sum() + q_slo[depth]),
            float(s_part.imag.sum() + q_shi[depth]),
        )
        return max(wp, wq)  # slack is bounded below by zero

    def dfs(depth: int, s_part: np.ndarray) -> None:
        nonlocal best_f, nodes, leaves, pruned
        nodes += 1
        if depth == mm:
            leaves += 1
            f = float(kernel.score(path[None, :]).objective[0])
            if f < best_f:
                best_f = f
                best[:] = path
            return
        if bound(depth, s_part) > best_f + _BOUND_MARGIN * (1.0 + abs(best_f)):
            pruned += 1
            return
        for p in range(3):
            path[depth] = p
            contrib = np.zeros(3, dtype=complex)
            contrib[p] = ds[depth, p]
            dfs(depth + 1, s_part + contrib)

    dfs(0, s_base.astype(complex))
    return _finish(
        snapshot, method, "branch-and-bound", best, kernel.movable, leaves,
        {"nodes": float(nodes), "pruned": float(pruned)}, profile, fit, q_adjust,
    )


def local_search(
    snapshot: CaseSnapshot,
    method: str = "fixv",
    profile: np.ndarray | None = None,
    fit: AffineFit | None = None,
    q_adjust: np.ndarray | None = None,
    options: SearchOptions | None = None,
    extra_starts: Sequence[Sequence[int]] = (),
) -> OptimizationOutcome:
    """Best-improvement descent over single-customer moves.

    Starts from the initial assignment, any extra starts, then seeded
    random restarts; each pass scores the whole one-move neighborhood and
    takes the best strict improvement."""

    options = options or SearchOptions()
    kernel = _make_kernel(snapshot, method, profile=profile, fit=fit, q_adjust=q_adjust)
    mm = kernel.n_movable
    rng = np.random.default_rng(options.seed)

    initial = PhaseAssignment.initial(snapshot.network)
    starts = [np.array([initial.phases[j] for j in kernel.movable], dtype=np.int64)]
    starts.extend(np.asarray(s, dtype=np.int64) for s in extra_starts)
    starts.extend(rng.integers(0, 3, size=mm) for _ in range(options.restarts))

    best_f = math.inf
    best = starts[0].copy()
    evaluations = 0
    for start in starts:
        x = start.copy()
        f = float(kernel.score(x[None, :]).objective[0])
        evaluations += 1
        for _ in range(options.max_sweeps):
            if mm == 0:
                break
            neighbors = np.repeat(x[None, :], 2 * mm, axis=0)
            row = 0
            for j in range(mm):
                for p in range(3):
                    if p != x[j]:
                        neighbors[row, j] = p
                        row += 1
            score = kernel.score(neighbors)
            evaluations += len(neighbors)
            i = int(np.argmin(score.objective))
            if score.objective[i] < f:
                f = float(score.objective[i])
                x = neighbors[i].copy()
            else:
                break
        if f < best_f:
            best_f = f
            best = x
    return _finish(
        snapshot, method, "local", best, kernel.movable, evaluations,
        {"starts": float(len(starts))}, profile, fit, q_adjust,
    )


def _search_once(
    snapshot: CaseSnapshot,
    method: str,
    profile: np.ndarray | None,
    fit: AffineFit | None,
    q_adjust: np.ndarray | None,
    options: SearchOptions,
    extra_starts: Sequence[Sequence[int]] = (),
) -> OptimizationOutcome:
    strategy = options.strategy
    if strategy == "auto":
        separable = method in ("fixv", "lbfm")
        small = 3 ** len(snapshot.adjustable_idx) <= options.enumeration_budget
        strategy = "exhaustive" if (separable and small) else "local"
    if strategy == "exhaustive":
        return exhaustive(snapshot, method, profile, fit, q_adjust, options)
    if strategy == "branch-and-bound":
        return branch_and_bound(snapshot, method, profile, fit, q_adjust, options)
    return local_search(
        snapshot, method, profile, fit, q_adjust, options, extra_starts=extra_starts
    )


# Search passes beyond this hold the incumbent assignment and only refresh
# the profile.  Near-tied argmins re-rank under profile updates of the same
# order as their fixed-point spread, so an exact solver can cycle through
# them indefinitely; holding after two passes keeps the remaining profile
# updates purely contractive.
_SEARCH_PASSES = 2


def fixv_algorithm1(
    snapshot: CaseSnapshot,
    algorithm: Algorithm1Options | None = None,
    search: SearchOptions | None = None,
    q_adjust: np.ndarray | None = None,
) -> OptimizationOutcome:
    """Iterated fixed-voltage refinement.

    Each outer pass solves the discrete assignment problem with customer
    currents frozen at the working voltage profile, then refreshes the
    profile from the chosen assignment's model voltages; it stops when the
    profile moves less than eps_v or the outer budget is spent. Cold runs
    start from the flat root-voltage profile, warm runs from the exact
    power flow of the initial assignment.

    Near-tied assignments can re-rank under the profile updates and trap
    the loop in a limit cycle (convergence of the iteration has no
    theoretical guarantee). Passes after the second therefore keep the
    incumbent assignment and only refresh the profile, which contracts
    geometrically to that assignment's fixed point; stats["pinned_outer"]
    records the first profile-only pass (0 when none was needed).

    The outcome's model view is evaluated at the profile the deciding
    search pass ran on, i.e. the estimate that actually selected the
    assignment; the trace records the loop's own profile convergence."""

    alg = algorithm or Algorithm1Options()
    opt = search or SearchOptions()
    network = snapshot.network
    initial = PhaseAssignment.initial(network)

    if alg.warm_start:
        base = solve_utpf(snapshot, initial, q_adjust=q_adjust)
        profile = np.asarray(base.v)
    else:
        profile = np.tile(network.v0.values, (network.n_buses, 1))
    prev_profile = profile

    delta = math.inf
    outer = 0
    candidates = 0
    trace: list[Algorithm1Step] = []
    extra_starts: list[np.ndarray] = []
    current: PhaseAssignment | None = None
    pinned_outer = 0
    decide_profile = profile

    while delta > alg.eps_v and outer < alg.max_outer:
        outer += 1
        if outer <= _SEARCH_PASSES or current is None:
            decide_profile = profile
            step = _search_once(
                snapshot, "fixv", profile, None, q_adjust, opt,
                extra_starts=extra_starts,
            )
            candidates += step.candidates
            current = step.assignment
            model = step.model
        else:
            if not pinned_outer:
                pinned_outer = outer
            model = evaluate_fixv(snapshot, current, profile, q_adjust=q_adjust)
        new_profile = np.asarray(model.v)
        delta = float(np.max(np.abs(new_profile - prev_profile)))
        trace.append(
            Algorithm1Step(
                outer=outer,
                phases=current.phases,
                delta_v=delta,
                model_objective=model.objective,
            )
        )
        prev_profile = new_profile
        profile = new_profile
        if alg.seed_next_search and outer < _SEARCH_PASSES:
            extra_starts = [
                np.array(
                    [current.phases[j] for j in _movable(snapshot)],
                    dtype=np.int64,
                )
            ]

    assert current is not None
    choices = np.array(
        [current.phases[j] for j in _movable(snapshot)], dtype=np.int64
    )
    return _finish(
        snapshot,
        "fixv",
        "algorithm1-warm" if alg.warm_start else "algorithm1-cold",
        choices,
        _movable(snapshot),
        candidates,
        {
            "outer": float(outer),
            "delta_v": float(delta),
            "pinned_outer": float(pinned_outer),
        },
        decide_profile,
        None,
        q_adjust,
        trace=tuple(trace),
    )


def _movable(snapshot: CaseSnapshot) -> np.ndarray:
    return np.asarray(sorted(snapshot.adjustable_idx), dtype=int)


def _minimize_1d(
    g: Callable[[float], float],
    lo: float,
    hi: float,
    t0: float,
    f0: float,
    coarse: int = 13,
    max_evals: int = 64,
) -> tuple[float, float, int]:
    """Coarse scan plus golden-section refinement; never worse than (t0, f0)."""

    points = np.unique(np.concatenate([np.linspace(lo, hi, coarse), [0.0, t0]]))
    points = points[(points >= lo) & (points <= hi)]
    values = []
    evals = 0
    for t in points:
        values.append(f0 if t == t0 else g(float(t)))
        evals += 1 if t != t0 else 0
    values = np.asarray(values)
    k = int(np.argmin(values))
    best_t, best_f = float(points[k]), float(values[k])

    a = float(points[max(0, k - 1)])
    b = float(points[min(len(points) - 1, k + 1)])
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = g(c), g(d)
    evals += 2
    while evals < max_evals and (b - a) > 1e-10 * max(1.0, hi - lo):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = g(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = g(d)
        evals += 1
    for t, f in ((c, fc), (d, fd)):
        if f < best_f:
            best_t, best_f = float(t), float(f)
    if f0 < best_f:
        best_t, best_f = t0, f0
    return best_t, best_f, evals


def optimize_pv_q(
    snapshot: CaseSnapshot,
    assignment: PhaseAssignment,
    method: str = "fixv",
    profile: np.ndarray | None = None,
    fit: AffineFit | None = None,
    q_start: np.ndarray | None = None,
    max_rounds: int = 8,
    sweep_tol: float = 1e-6,
) -> tuple[np.ndarray, EvaluationResult, Mapping[str, float]]:
    """Cyclic coordinate descent on the per-customer reactive adjustments.

    Customers with a non-degenerate reactive band are visited in ascending
    position; each coordinate is minimized over its band by a coarse scan
    plus golden-section refinement under the chosen model. The objective
    never increases; rounds stop once a full sweep improves by less than
    sweep_tol."""

    evaluator = _model_evaluator(method, profile, fit)
    q = np.zeros(snapshot.network.n_customers) if q_start is None else np.array(q_start, dtype=float)
    free = [
        int(c)
        for c in range(snapshot.network.n_customers)
        if snapshot.q_hi_pu[c] - snapshot.q_lo_pu[c] > 0.0
    ]
    f_cur = evaluator(snapshot, assignment, q).objective
    total_evals = 1
    rounds = 0
    for _ in range(max_rounds):
        rounds += 1
        f_round = f_cur
        for c in free:
            def g(t: float) -> float:
                trial = q.copy()
                trial[c] = t
                return evaluator(snapshot, assignment, trial).objective

            t_best, f_best, used = _minimize_1d(
                g, float(snapshot.q_lo_pu[c]), float(snapshot.q_hi_pu[c]),
                float(q[c]), f_cur,
            )
            total_evals += used
            if f_best < f_cur:
                q[c] = t_best
                f_cur = f_best
        if f_round - f_cur < sweep_tol:
            break
    final = evaluator(snapshot, assignment, q)
    return q, final, {"evaluations": float(total_evals), "rounds": float(rounds)}
