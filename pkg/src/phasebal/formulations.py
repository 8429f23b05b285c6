"""Steady-state formulations sharing one phase-balancing objective.

Every formulation prices an assignment the same way: the largest pairwise
spread of the transformer's per-phase active and reactive power, plus a
big-M penalty on slack against voltage-magnitude, voltage-unbalance and
transformer-current limits. What differs is the voltage model:

* fixed-voltage: customer currents frozen at a given voltage profile and
  replayed through the path impedances, exact at the profile's fixed point;
* linearized-inverse: currents affine in the local bus voltage through a
  fitted approximation of 1/conj(V), closed by one direct linear solve;
* lossless branch-flow: squared-magnitude voltage propagation with
  nominally rotated per-phase flows and no voltage feedback at all.

All evaluators return the same result shape, so search code can score
assignments under any model and verify winners against the exact power
flow. The private *Batch kernels score many assignments at once and are
the workhorses behind enumeration and local search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .netmodel import CaseSnapshot, Limits, Network, Phasor3
from .powerflow import (
    PFSolution,
    PhaseAssignment,
    check_assignment,
    feeder_geometry,
    solve_utpf,
)

CHI = complex(np.exp(-2j * np.pi / 3))
# Row vector turning phase values into 3x the negative-sequence component.
_NEG_ROW = np.array([1.0, CHI, CHI**2], dtype=complex)
# BETA[phi, p]: assumed voltage ratio V_phi / V_p under exact 120 deg spacing.
BETA = np.array([[CHI ** ((phi - p) % 3) for p in range(3)] for phi in range(3)])

__all__ = [
    "AffineFit",
    "EvaluationResult",
    "FormulationError",
    "Limits",
    "Slacks",
    "compute_slacks",
    "dt_unbalance",
    "evaluate_exact",
    "evaluate_fixv",
    "evaluate_lbfm",
    "evaluate_linv",
    "fit_inverse_voltage",
    "negative_sequence",
]


class FormulationError(RuntimeError):
    """A formulation could not be evaluated on the given case."""


def negative_sequence(v: np.ndarray) -> np.ndarray | complex:
    """Negative-sequence component (V_a + chi*V_b + chi^2*V_c) / 3.

    Accepts any (..., 3) complex array; returns a scalar for a single phasor.
    """

    arr = np.asarray(getattr(v, "values", v), dtype=complex)
    if arr.shape[-1] != 3:
        raise ValueError("phase values must lie along a final axis of size 3")
    out = arr @ (_NEG_ROW / 3.0)
    return complex(out) if out.ndim == 0 else out


def dt_unbalance(s_dt: np.ndarray) -> float:
    """Largest pairwise gap among per-phase P and among per-phase Q."""

    s = np.asarray(s_dt, dtype=complex)
    if s.shape != (3,):
        raise ValueError("expected the three per-phase transformer powers")
    return float(max(np.ptp(s.real), np.ptp(s.imag)))


@dataclass(frozen=True, eq=False)
class Slacks:
    """Non-negative limit violations; voltage entries per bus, current per phase.

    When squared_voltage_units is set (branch-flow model) v_lo, v_hi and
    neg_seq are expressed in squared per-unit, matching that model's
    constraint space; they still sum into the objective unconverted.
    """

    v_lo: np.ndarray  # (buses,)
    v_hi: np.ndarray  # (buses,)
    neg_seq: np.ndarray  # (buses,)
    i_dt: np.ndarray  # (3,)
    squared_voltage_units: bool = False

    def __post_init__(self) -> None:
        for nameattr in ("v_lo", "v_hi", "neg_seq", "i_dt"):
            arr = np.asarray(getattr(self, nameattr), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{nameattr} slack must be non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, nameattr, arr)

    def total(self) -> float:
        return float(
            self.v_lo.sum() + self.v_hi.sum() + self.neg_seq.sum() + self.i_dt.sum()
        )


def compute_slacks(
    v: np.ndarray,
    i_dt_mag: np.ndarray,
    limits: Limits,
    mode: str = "exact",
    nominal: Phasor3 | np.ndarray | None = None,
) -> Slacks:
    """Slack against voltage, unbalance and transformer-current limits.

    v is the (buses, 3) complex voltage field, i_dt_mag the three transformer
    current magnitudes. mode "exact" tests |V| on both sides; "linearized"
    tests the lower bound through the projection X cos(d) + Y sin(d) onto the
    nominal phase directions (nominal required), matching the model that
    treats the lower magnitude bound linearly. One shared slack per bus.
    """

    varr = np.asarray(v, dtype=complex)
    vm = np.abs(varr)
    if mode == "exact":
        lo = limits.v_min - vm.min(axis=1)
    elif mode == "linearized":
        if nominal is None:
            raise ValueError("linearized mode needs the nominal phase directions")
        ang = np.angle(np.asarray(getattr(nominal, "values", nominal), dtype=complex))
        proj = varr.real * np.cos(ang) + varr.imag * np.sin(ang)
        lo = limits.v_min - proj.min(axis=1)
    else:
        raise ValueError(f"unknown slack mode {mode!r}")
    hi = vm.max(axis=1) - limits.v_max
    neg = np.abs(varr @ (_NEG_ROW / 3.0)) - limits.neg_seq_max
    rho = np.asarray(i_dt_mag, dtype=float) - limits.i_dt_max
    zero = 0.0
    return Slacks(
        v_lo=np.maximum(zero, lo),
        v_hi=np.maximum(zero, hi),
        neg_seq=np.maximum(zero, neg),
        i_dt=np.maximum(zero, rho),
    )


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    """One formulation's view of one assignment on one period."""

    method: str
    phases: tuple[int, ...]
    pi: float  # transformer power spread
    slacks: Slacks
    objective: float  # pi + mb * total slack
    s_dt: np.ndarray  # (3,) complex transformer power
    vm: np.ndarray  # (buses, 3) voltage magnitudes under the model
    vneg: np.ndarray  # (buses,) model unbalance; squared units for branch-flow
    v: np.ndarray | None = None  # (buses, 3) phasors when the model has them
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        s = np.asarray(self.s_dt, dtype=complex)
        s.setflags(write=False)
        object.__setattr__(self, "s_dt", s)
        for nameattr, kind in (("vm", float), ("vneg", complex)):
            arr = np.asarray(getattr(self, nameattr), dtype=kind)
            arr.setflags(write=False)
            object.__setattr__(self, nameattr, arr)
        if self.v is not None:
            arr = np.asarray(self.v, dtype=complex)
            arr.setflags(write=False)
            object.__setattr__(self, "v", arr)

    @property
    def penalty(self) -> float:
        return self.objective - self.pi


def _effective_loads(snapshot: CaseSnapshot, q_adjust: np.ndarray | None) -> np.ndarray:
    s = snapshot.s_pu.copy()
    if q_adjust is not None:
        dq = np.asarray(q_adjust, dtype=float)
        if dq.shape != s.shape:
            raise ValueError("q_adjust must have one entry per customer")
        if np.any(dq < snapshot.q_lo_pu - 1e-12) or np.any(dq > snapshot.q_hi_pu + 1e-12):
            raise ValueError("q_adjust outside the snapshot's reactive bounds")
        s = s + 1j * dq
    return s


def _phase_path_impedances(network: Network, phases: np.ndarray) -> np.ndarray:
    """sel[j, m, phi] = shared-path impedance row Meet[m, bus_j][phi, p_j]."""

    geometry = feeder_geometry(network)
    picked = geometry.meet[:, geometry.cust_bus]  # (buses, customers, 3, 3)
    m = len(phases)
    return picked[:, np.arange(m), :, phases]  # advanced indexing -> (m, buses, 3)


def _dt_current(phases: np.ndarray, i_cust: np.ndarray) -> np.ndarray:
    i_dt = np.zeros(3, dtype=complex)
    np.add.at(i_dt, phases, i_cust)
    return i_dt


def evaluate_exact(
    snapshot: CaseSnapshot,
    assignment: PhaseAssignment,
    q_adjust: np.ndarray | None = None,
    solution: PFSolution | None = None,
) -> EvaluationResult:
    """Objective under the exact power flow; the verification reference."""

    if solution is None:
        solution = solve_utpf(snapshot, assignment, q_adjust=q_adjust)
    geometry = feeder_geometry(snapshot.network)
    i_root = sum(solution.i_lines[li] for li in geometry.root_lines)
    slacks = compute_slacks(solution.v, np.abs(i_root), snapshot.network.limits)
    pi = dt_unbalance(solution.s_dt)
    objective = pi + snapshot.network.limits.mb * slacks.total()
    return EvaluationResult(
        method="utpf",
        phases=tuple(int(p) for p in solution.cust_phase),
        pi=pi,
        slacks=slacks,
        objective=objective,
        s_dt=solution.s_dt,
        vm=np.abs(solution.v),
        vneg=np.asarray(solution.v @ (_NEG_ROW / 3.0)),
        v=solution.v,
        meta={"iterations": solution.iterations, "mismatch": solution.mismatch},
    )


def evaluate_fixv(
    snapshot: CaseSnapshot,
    assignment: PhaseAssignment,
    profile: np.ndarray | None = None,
    q_adjust: np.ndarray | None = None,
) -> EvaluationResult:
    """Fixed-voltage model: currents conj(s)/conj(V_profile), linear replay.

    profile is a (buses, 3) complex voltage field; omitted, every customer
    sees the root voltage (flat profile). The model voltages returned in v
    are the natural next profile for iterated refinement.
    """

    check_assignment(snapshot, assignment)
    network = snapshot.network
    geometry = feeder_geometry(network)
    v0 = network.v0.values
    n = network.n_buses

    if profile is None:
        profile = np.tile(v0, (n, 1))
        profile_kind = "flat"
    else:
        profile = np.asarray(profile, dtype=complex)
        if profile.shape != (n, 3):
            raise ValueError(f"profile must be (buses, 3), got {profile.shape}")
        profile_kind = "given"

    s = _effective_loads(snapshot, q_adjust)
    phases = np.asarray(assignment.phases, dtype=int)
    vfix = profile[geometry.cust_bus, phases]
    if np.any(np.abs(vfix) < 1e-6):
        raise FormulationError("voltage profile vanishes at a customer connection")
    i_cust = np.conj(s) / np.conj(vfix)

    sel = _phase_path_impedances(network, phases)  # (customers, buses, 3)
    v = v0[None, :] - np.einsum("jmf,j->mf", sel, i_cust)
    i_dt = _dt_current(phases, i_cust)
    s_dt = v0 * np.conj(i_dt)
    slacks = compute_slacks(v, np.abs(i_dt), network.limits)
    pi = dt_unbalance(s_dt)
    objective = pi + network.limits.mb * slacks.total()
    return EvaluationResult(
        method="fixv",
        phases=tuple(assignment.phases),
        pi=pi,
        slacks=slacks,
        objective=objective,
        s_dt=s_dt,
        vm=np.abs(v),
        vneg=np.asarray(v @ (_NEG_ROW / 3.0)),
        v=v,
        meta={"profile": profile_kind},
    )


@dataclass(frozen=True, eq=False)
class AffineFit:
    """Per-phase affine surrogate for 1/conj(V) over a voltage window.

    Re g = bx + kx*X + ky*Y and Im g = by + hx*X + hy*Y, with X, Y the
    rectangular voltage parts; one coefficient row per phase, fitted around
    each phase's nominal direction. max_residual is the worst |g - 1/conj(V)|
    on a denser validation grid over the same window.
    """

    bx: np.ndarray
    kx: np.ndarray
    ky: np.ndarray
    by: np.ndarray
    hx: np.ndarray
    hy: np.ndarray
    vm_range: tuple[float, float]
    angle_halfwidth_rad: float
    max_residual: float

    def __post_init__(self) -> None:
        for nameattr in ("bx", "kx", "ky", "by", "hx", "hy"):
            arr = np.asarray(getattr(self, nameattr), dtype=float)
            if arr.shape != (3,):
                raise ValueError(f"{nameattr} must hold one coefficient per phase")
            arr.setflags(write=False)
            object.__setattr__(self, nameattr, arr)

    # Complex-coefficient view: g = cb + ck * Re(V) + ch * Im(V).
    @property
    def cb(self) -> np.ndarray:
        return self.bx + 1j * self.by

    @property
    def ck(self) -> np.ndarray:
        return self.kx + 1j * self.hx

    @property
    def ch(self) -> np.ndarray:
        return self.ky + 1j * self.hy

    def g(self, v: np.ndarray, phase: np.ndarray | int) -> np.ndarray:
        varr = np.asarray(v, dtype=complex)
        return self.cb[phase] + self.ck[phase] * varr.real + self.ch[phase] * varr.imag


def fit_inverse_voltage(
    v0: Phasor3 | np.ndarray,
    limits: Limits,
    n_mag: int = 20,
    n_ang: int = 20,
    n_validation: int = 50,
) -> AffineFit:
    """Least-squares affine fit of 1/conj(V) per phase.

    The window spans the voltage-magnitude limits and the angle halfwidth
    around each phase's nominal direction; the fit minimizes the squared
    complex error on an n_mag x n_ang grid.
    """

    v0arr = np.asarray(getattr(v0, "values", v0), dtype=complex)
    delta = limits.angle_halfwidth_rad
    coef = {k: np.zeros(3) for k in ("bx", "kx", "ky", "by", "hx", "hy")}
    worst = 0.0
    for phi in range(3):
        center = float(np.angle(v0arr[phi]))

        def window(nm: int, na: int) -> np.ndarray:
            mags = np.linspace(limits.v_min, limits.v_max, nm)
            angs = np.linspace(center - delta, center + delta, na)
            return (mags[:, None] * np.exp(1j * angs[None, :])).ravel()

        v = window(n_mag, n_ang)
        target = 1.0 / np.conj(v)
        design = np.column_stack([np.ones(v.size), v.real, v.imag])
        re_c, *_ = np.linalg.lstsq(design, target.real, rcond=None)
        im_c, *_ = np.linalg.lstsq(design, target.imag, rcond=None)
        coef["bx"][phi], coef["kx"][phi], coef["ky"][phi] = re_c
        coef["by"][phi], coef["hx"][phi], coef["hy"][phi] = im_c

        check = window(n_validation, n_validation)
        approx = (re_c[0] + re_c[1] * check.real + re_c[2] * check.imag) + 1j * (
            im_c[0] + im_c[1] * check.real + im_c[2] * check.imag
        )
        worst = max(worst, float(np.max(np.abs(approx - 1.0 / np.conj(check)))))

    return AffineFit(
        vm_range=(limits.v_min, limits.v_max),
        angle_halfwidth_rad=delta,
        max_residual=worst,
        **coef,
    )


@lru_cache(maxsize=8)
def _default_fit(network: Network) -> AffineFit:
    return fit_inverse_voltage(network.v0, network.limits)


def evaluate_linv(
    snapshot: CaseSnapshot,
    assignment: PhaseAssignment,
    fit: AffineFit | None = None,
    q_adjust: np.ndarray | None = None,
) -> EvaluationResult:
    """Linearized-inverse model closed by a direct real linear solve.

    Customer currents are affine in their bus voltage via the fitted
    surrogate, so all bus voltages satisfy one linear system; it is
    assembled over the rectangular components (6 real unknowns per bus)
    and solved directly. A singular or ill-conditioned system raises
    FormulationError. Slack uses the linearized lower voltage bound.
    """

    check_assignment(snapshot, assignment)
    network = snapshot.network
    geometry = feeder_geometry(network)
    if fit is None:
        fit = _default_fit(network)
    v0 = network.v0.values
    n = network.n_buses

    s = _effective_loads(snapshot, q_adjust)
    phases = np.asarray(assignment.phases, dtype=int)
    sel = _phase_path_impedances(network, phases)  # (customers, buses, 3)

    # Unknowns x = [X(bus, phase); Y(bus, phase)], row-major over (bus, phase).
    nv = 3 * n
    a = np.eye(2 * nv)
    rhs = np.concatenate([np.tile(v0.real, n), np.tile(v0.imag, n)])

    kmat = sel * np.conj(s)[:, None, None]  # (customers, buses, 3)
    cb, ck, ch = fit.cb[phases], fit.ck[phases], fit.ch[phases]
    rows = np.arange(nv)
    for j in range(len(s)):
        col = 3 * geometry.cust_bus[j] + phases[j]
        kflat = kmat[j].ravel()  # complex coupling of every (bus, phase) row
        a[rows, col] += (kflat * ck[j]).real
        a[rows, nv + col] += (kflat * ch[j]).real
        a[nv + rows, col] += (kflat * ck[j]).imag
        a[nv + rows, nv + col] += (kflat * ch[j]).imag
        rhs[:nv] -= (kflat * cb[j]).real
        rhs[nv:] -= (kflat * cb[j]).imag

    try:
        x = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        raise FormulationError(
            f"voltage system is singular (cond ~ {np.linalg.cond(a):.3e})"
        ) from None
    residual = float(np.max(np.abs(a @ x - rhs)))
    scale = 1.0 + float(np.max(np.abs(rhs)))
    if not np.isfinite(residual) or residual > 1e-10 * scale:
        raise FormulationError(
            f"voltage system solve residual {residual:.3e} exceeds tolerance "
            f"(cond ~ {np.linalg.cond(a):.3e})"
        )

    v = (x[:nv] + 1j * x[nv:]).reshape(n, 3)
    vc = v[geometry.cust_bus, phases]
    i_cust = np.conj(s) * fit.g(vc, phases)
    i_dt = _dt_current(phases, i_cust)
    s_dt = v0 * np.conj(i_dt)
    slacks = compute_slacks(v, np.abs(i_dt), network.limits, mode="linearized", nominal=v0)
    pi = dt_unbalance(s_dt)
    objective = pi + network.limits.mb * slacks.total()
    return EvaluationResult(
        method="linv",
        phases=tuple(assignment.phases),
        pi=pi,
        slacks=slacks,
        objective=objective,
        s_dt=s_dt,
        vm=np.abs(v),
        vneg=np.asarray(v @ (_NEG_ROW / 3.0)),
        v=v,
        meta={"fit_residual": fit.max_residual, "system_residual": residual},
    )


def evaluate_lbfm(
    snapshot: CaseSnapshot,
    assignment: PhaseAssignment,
    q_adjust: np.ndarray | None = None,
) -> EvaluationResult:
    """Lossless branch-flow model over squared voltage magnitudes.

    Per-phase flows aggregate customer powers unchanged (no losses, no
    voltage feedback); squared magnitudes and the unbalance surrogate
    propagate through the path impedances under nominal phase rotation.
    Voltage-type slacks are in squared per-unit; the transformer current
    surrogate is |S_phase| / |V0_phase|.
    """

    check_assignment(snapshot, assignment)
    network = snapshot.network
    geometry = feeder_geometry(network)
    v0 = network.v0.values
    limits = network.limits
    n = network.n_buses

    s = _effective_loads(snapshot, q_adjust)
    phases = np.asarray(assignment.phases, dtype=int)
    sel = _phase_path_impedances(network, phases)  # (customers, buses, 3)

    beta_sel = BETA[:, phases].T  # (customers, 3): ratio toward each observed phase
    ddiag = 2.0 * np.real(beta_sel[:, None, :] * s[:, None, None] * np.conj(sel))
    diag = np.abs(v0) ** 2 - ddiag.sum(axis=0)  # (buses, 3)

    vneg0 = complex(_NEG_ROW @ v0) / 3.0
    i_nom = np.conj(s) / np.conj(v0[phases])
    vneg = vneg0 - np.einsum("j,jm->m", i_nom / 3.0, sel @ _NEG_ROW)

    s_dt = np.zeros(3, dtype=complex)
    np.add.at(s_dt, phases, s)

    v_lo = np.maximum(0.0, limits.v_min**2 - diag.min(axis=1))
    v_hi = np.maximum(0.0, diag.max(axis=1) - limits.v_max**2)
    neg = np.maximum(0.0, np.abs(vneg) ** 2 - limits.neg_seq_max**2)
    rho = np.maximum(0.0, np.abs(s_dt) / np.abs(v0) - limits.i_dt_max)
    slacks = Slacks(v_lo=v_lo, v_hi=v_hi, neg_seq=neg, i_dt=rho, squared_voltage_units=True)

    pi = dt_unbalance(s_dt)
    objective = pi + limits.mb * slacks.total()
    return EvaluationResult(
        method="lbfm",
        phases=tuple(assignment.phases),
        pi=pi,
        slacks=slacks,
        objective=objective,
        s_dt=s_dt,
        vm=np.sqrt(np.clip(diag, 0.0, None)),
        vneg=vneg,
        v=None,
        meta={"voltage_units": "squared"},
    )


# ---------------------------------------------------------------------------
# Batch scoring kernels (internal).
#
# Search code scores thousands of assignments per period. Customer effects
# under the fixed-voltage and branch-flow models are separable, so each
# kernel precomputes per-(customer, phase) effect tables, folds the
# non-adjustable customers into a base state, and scores a batch through two
# half-assignment lookup tables. Slack terms are only evaluated on the buses
# that could possibly violate a limit under some assignment (triangle bound
# on the movable customers' total effect); all other buses contribute zero
# slack for every candidate. The linearized-inverse model is not separable
# and uses a batched fixed-point solve instead.
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BatchScore:
    objective: np.ndarray
    pi: np.ndarray
    slack_total: np.ndarray


def _batch_ptp(s: np.ndarray) -> np.ndarray:
    return np.maximum(np.ptp(s.real, axis=1), np.ptp(s.imag, axis=1))


def _movable_positions(snapshot: CaseSnapshot) -> np.ndarray:
    return np.asarray(sorted(snapshot.adjustable_idx), dtype=int)


def _combo_table(k: int) -> np.ndarray:
    """All 3**k phase tuples in lexicographic order, first position slowest."""

    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.meshgrid(*([np.arange(3)] * k), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _radix(k: int) -> np.ndarray:
    return 3 ** np.arange(k - 1, -1, -1, dtype=np.int64) if k else np.zeros(0, np.int64)


class _SeparableKernel:
    """Shared half-table machinery for separable assignment effects."""

    def __init__(self, snapshot: CaseSnapshot) -> None:
        self.snapshot = snapshot
        self.network = snapshot.network
        self.limits = snapshot.network.limits
        self.movable = _movable_positions(snapshot)
        self.initial = np.array(
            [c.initial_phase for c in self.network.customers], dtype=int
        )

    @property
    def n_movable(self) -> int:
        return len(self.movable)

    def full_phases(self, choices: np.ndarray) -> np.ndarray:
        choices = np.asarray(choices, dtype=int)
        full = np.tile(self.initial, (choices.shape[0], 1))
        full[:, self.movable] = choices
        return full

    def _split(self) -> tuple[np.ndarray, np.ndarray]:
        k1 = (self.n_movable + 1) // 2
        return self.movable[:k1], self.movable[k1:]

    def _indices(self, choices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k1 = (self.n_movable + 1) // 2
        return choices[:, :k1] @ _radix(k1), choices[:, k1:] @ _radix(
            self.n_movable - k1
        )


class _FixvKernel(_SeparableKernel):
    """Batch scorer for the fixed-voltage model at one voltage profile."""

    method = "fixv"
    separable = True

    def __init__(
        self,
        snapshot: CaseSnapshot,
        profile: np.ndarray | None = None,
        q_adjust: np.ndarray | None = None,
    ) -> None:
        super().__init__(snapshot)
        network = self.network
        geometry = feeder_geometry(network)
        v0 = network.v0.values
        n = network.n_buses
        limits = self.limits

        if profile is None:
            profile = np.tile(v0, (n, 1))
        else:
            profile = np.asarray(profile, dtype=complex)
            if profile.shape != (n, 3):
                raise ValueError(f"profile must be (buses, 3), got {profile.shape}")
        s = _effective_loads(snapshot, q_adjust)

        vfix_all = profile[geometry.cust_bus]  # (customers, 3)
        if np.any(np.abs(vfix_all) < 1e-6):
            raise FormulationError("voltage profile vanishes at a customer bus")
        i_all = np.conj(s)[:, None] / np.conj(vfix_all)  # (customers, 3 options)
        ds_all = v0[None, :] * np.conj(i_all)  # value landing on the chosen phase
        picked = geometry.meet[:, geometry.cust_bus]  # (buses, customers, 3, 3)
        dv_all = -np.transpose(picked, (1, 3, 0, 2)) * i_all[:, :, None, None]
        # dv_all[j, p, bus, phi]: voltage effect of customer j connected at p.

        fixed = np.setdiff1d(np.arange(len(s)), self.movable)
        v_base = np.tile(v0, (n, 1))
        s_base = np.zeros(3, dtype=complex)
        if len(fixed):
            pf = self.initial[fixed]
            v_base = v_base + dv_all[fixed, pf].sum(axis=0)
            np.add.at(s_base, pf, ds_all[fixed, pf])
        self.s_base = s_base
        self.ds_choice = ds_all[self.movable]  # (mm, 3) complex
        dv_mov = dv_all[self.movable]  # (mm, 3, buses, 3)

        # Buses that could violate a limit under some choice of the movables.
        bound = np.abs(dv_mov).max(axis=1).sum(axis=0) if self.n_movable else np.zeros((n, 3))
        vm_base = np.abs(v_base)
        vneg_base = v_base @ (_NEG_ROW / 3.0)
        if self.n_movable:
            bneg = np.abs(dv_mov @ (_NEG_ROW / 3.0)).max(axis=1).sum(axis=0)
        else:
            bneg = np.zeros(n)
        cap = (
            ((vm_base - bound).min(axis=1) < limits.v_min)
            | ((vm_base + bound).max(axis=1) > limits.v_max)
            | (np.abs(vneg_base) + bneg > limits.neg_seq_max)
        )
        self.cap_idx = np.flatnonzero(cap)
        self.v_base_cap = v_base[self.cap_idx]

        h1, h2 = self._split()
        self.sv1, self.sv2, self.vv1, self.vv2 = self._half_tables(
            dv_all, ds_all, h1, h2
        )

    def _half_tables(self, dv_all, ds_all, h1, h2):
        def build(h):
            combos = _combo_table(len(h))
            sv = np.zeros((combos.shape[0], 3), dtype=complex)
            vv = np.zeros((combos.shape[0], len(self.cap_idx), 3), dtype=complex)
            rows = np.arange(combos.shape[0])
            for local, j in enumerate(h):
                pj = combos[:, local]
                np.add.at(sv, (rows, pj), ds_all[j, pj])
                vv += dv_all[j][pj][:, self.cap_idx, :]
            return sv, vv

        sv1, vv1 = build(h1)
        sv2, vv2 = build(h2)
        return sv1, sv2, vv1, vv2

    def score(self, choices: np.ndarray) -> _BatchScore:
        choices = np.asarray(choices, dtype=np.int64)
        idx1, idx2 = self._indices(choices)
        s_dt = self.s_base + self.sv1[idx1] + self.sv2[idx2]
        pi = _batch_ptp(s_dt)
        limits = self.limits
        rho = np.maximum(0.0, np.abs(s_dt) / np.abs(self.network.v0.values) - limits.i_dt_max)
        slack = rho.sum(axis=1)
        if len(self.cap_idx):
            v = self.v_base_cap + self.vv1[idx1] + self.vv2[idx2]
            vm = np.abs(v)
            slack = slack + np.maximum(0.0, limits.v_min - vm.min(axis=2)).sum(axis=1)
            slack = slack + np.maximum(0.0, vm.max(axis=2) - limits.v_max).sum(axis=1)
            vneg = np.abs(v @ (_NEG_ROW / 3.0))
            slack = slack + np.maximum(0.0, vneg - limits.neg_seq_max).sum(axis=1)
        return _BatchScore(objective=pi + limits.mb * slack, pi=pi, slack_total=slack)


class _LbfmKernel(_SeparableKernel):
    """Batch scorer for the lossless branch-flow model."""

    method = "lbfm"
    separable = True

    def __init__(self, snapshot: CaseSnapshot, q_adjust: np.ndarray | None = None) -> None:
        super().__init__(snapshot)
        network = self.network
        geometry = feeder_geometry(network)
        v0 = network.v0.values
        n = network.n_buses
        limits = self.limits

        s = _effective_loads(snapshot, q_adjust)
        picked = geometry.meet[:, geometry.cust_bus]  # (buses, customers, 3, 3)
        meet_t = np.transpose(picked, (1, 3, 0, 2))  # (customers, p, buses, phi)
        # ddiag_all[j, p, bus, phi]: squared-magnitude drop at (bus, phi) when
        # customer j sits on phase p; dneg_all[j, p, bus]: unbalance surrogate.
        ddiag_all = 2.0 * np.real(
            BETA.T[None, :, None, :] * s[:, None, None, None] * np.conj(meet_t)
        )
        dneg_all = (
            (1.0 / np.conj(v0))[None, :, None] / 3.0
        ) * np.conj(s)[:, None, None] * (meet_t @ _NEG_ROW)

        fixed = np.setdiff1d(np.arange(len(s)), self.movable)
        diag_base = np.tile(np.abs(v0) ** 2, (n, 1))
        vneg_base = np.full(n, complex(_NEG_ROW @ v0) / 3.0)
        s_base = np.zeros(3, dtype=complex)
        if len(fixed):
            pf = self.initial[fixed]
            diag_base = diag_base - ddiag_all[fixed, pf].sum(axis=0)
            vneg_base = vneg_base - dneg_all[fixed, pf].sum(axis=0)
            np.add.at(s_base, pf, s[fixed])
        self.s_base = s_base
        self.ds_choice = np.tile(s[self.movable][:, None], (1, 3))
        ddiag_mov = ddiag_all[self.movable]
        dneg_mov = dneg_all[self.movable]

        vmin2, vmax2 = limits.v_min**2, limits.v_max**2
        if self.n_movable:
            bound = np.abs(ddiag_mov).max(axis=1).sum(axis=0)
            bneg = np.abs(dneg_mov).max(axis=1).sum(axis=0)
        else:
            bound = np.zeros((n, 3))
            bneg = np.zeros(n)
        cap = (
            ((diag_base - bound).min(axis=1) < vmin2)
            | ((diag_base + bound).max(axis=1) > vmax2)
            | (np.abs(vneg_base) + bneg > limits.neg_seq_max)
        )
        self.cap_idx = np.flatnonzero(cap)
        self.diag_base_cap = diag_base[self.cap_idx]
        self.vneg_base_cap = vneg_base[self.cap_idx]

        h1, h2 = self._split()

        def build(h):
            combos = _combo_table(len(h))
            sv = np.zeros((combos.shape[0], 3), dtype=complex)
            dd = np.zeros((combos.shape[0], len(self.cap_idx), 3))
            dn = np.zeros((combos.shape[0], len(self.cap_idx)), dtype=complex)
            rows = np.arange(combos.shape[0])
            for local, j in enumerate(h):
                pj = combos[:, local]
                np.add.at(sv, (rows, pj), s[j])
                dd += ddiag_all[j][pj][:, self.cap_idx, :]
                dn += dneg_all[j][pj][:, self.cap_idx]
            return sv, dd, dn

        self.sv1, self.dd1, self.dn1 = build(h1)
        self.sv2, self.dd2, self.dn2 = build(h2)

    def score(self, choices: np.ndarray) -> _BatchScore:
        choices = np.asarray(choices, dtype=np.int64)
        idx1, idx2 = self._indices(choices)
        s_dt = self.s_base + self.sv1[idx1] + self.sv2[idx2]
        pi = _batch_ptp(s_dt)
        limits = self.limits
        v0m = np.abs(self.network.v0.values)
        slack = np.maximum(0.0, np.abs(s_dt) / v0m - limits.i_dt_max).sum(axis=1)
        if len(self.cap_idx):
            diag = self.diag_base_cap - self.dd1[idx1] - self.dd2[idx2]
            slack = slack + np.maximum(0.0, limits.v_min**2 - diag.min(axis=2)).sum(axis=1)
            slack = slack + np.maximum(0.0, diag.max(axis=2) - limits.v_max**2).sum(axis=1)
            vneg = np.abs(self.vneg_base_cap - self.dn1[idx1] - self.dn2[idx2])
            slack = slack + np.maximum(0.0, vneg**2 - limits.neg_seq_max**2).sum(axis=1)
        return _BatchScore(objective=pi + limits.mb * slack, pi=pi, slack_total=slack)


class _LinvKernel:
    """Batch scorer for the linearized-inverse model (fixed-point solve)."""

    method = "linv"
    separable = False

    def __init__(
        self,
        snapshot: CaseSnapshot,
        fit: AffineFit | None = None,
        q_adjust: np.ndarray | None = None,
        tol: float = 1e-12,
        max_iter: int = 80,
    ) -> None:
        self.snapshot = snapshot
        self.network = snapshot.network
        self.limits = snapshot.network.limits
        self.movable = _movable_positions(snapshot)
        self.initial = np.array(
            [c.initial_phase for c in self.network.customers], dtype=int
        )
        self.fit = fit if fit is not None else _default_fit(self.network)
        self.s = _effective_loads(snapshot, q_adjust)
        self.tol = tol
        self.max_iter = max_iter

        geometry = feeder_geometry(self.network)
        cb = geometry.cust_bus
        self.cmeet = geometry.meet[np.ix_(cb, cb)]  # (cust, cust, 3, 3)
        picked = geometry.meet[:, cb]  # (buses, cust, 3, 3)
        self.gbus = np.transpose(picked, (1, 3, 0, 2))  # (cust, p, buses, phi)
        self.v0 = self.network.v0.values
        self.nominal_angles = np.angle(self.v0)

    @property
    def n_movable(self) -> int:
        return len(self.movable)

    def full_phases(self, choices: np.ndarray) -> np.ndarray:
        choices = np.asarray(choices, dtype=int)
        full = np.tile(self.initial, (choices.shape[0], 1))
        full[:, self.movable] = choices
        return full

    def score(self, choices: np.ndarray, chunk: int = 128) -> _BatchScore:
        choices = np.asarray(choices, dtype=np.int64)
        b = choices.shape[0]
        obj = np.empty(b)
        pi = np.empty(b)
        slack = np.empty(b)
        for lo in range(0, b, chunk):
            hi = min(lo + chunk, b)
            o, p, sl = self._score_chunk(self.full_phases(choices[lo:hi]))
            obj[lo:hi], pi[lo:hi], slack[lo:hi] = o, p, sl
        return _BatchScore(objective=obj, pi=pi, slack_total=slack)

    def _score_chunk(self, phases: np.ndarray):
        fit, s, limits = self.fit, self.s, self.limits
        b, m = phases.shape
        jj = np.arange(m)
        mmat = self.cmeet[jj[None, :, None], jj[None, None, :], phases[:, :, None], phases[:, None, :]]
        cb, ck, ch = fit.cb[phases], fit.ck[phases], fit.ch[phases]
        sconj = np.conj(s)[None, :]
        v0c = self.v0[phases]

        v = v0c.copy()
        i_cust = sconj * (cb + ck * v.real + ch * v.imag)
        for _ in range(self.max_iter):
            v_new = v0c - np.einsum("bjk,bk->bj", mmat, i_cust)
            delta = float(np.max(np.abs(v_new - v))) if v.size else 0.0
            v = v_new
            i_cust = sconj * (cb + ck * v.real + ch * v.imag)
            if delta <= self.tol:
                break
        else:
            raise FormulationError(
                f"voltage fixed point did not contract below {self.tol:.1e}"
            )

        gsel = self.gbus[jj[None, :], phases]  # (b, cust, buses, 3)
        vbus = self.v0[None, None, :] - np.einsum("bjnf,bj->bnf", gsel, i_cust)

        ang = self.nominal_angles
        proj = vbus.real * np.cos(ang) + vbus.imag * np.sin(ang)
        slack = np.maximum(0.0, limits.v_min - proj.min(axis=2)).sum(axis=1)
        vm = np.abs(vbus)
        slack += np.maximum(0.0, vm.max(axis=2) - limits.v_max).sum(axis=1)
        vneg = np.abs(vbus @ (_NEG_ROW / 3.0))
        slack += np.maximum(0.0, vneg - limits.neg_seq_max).sum(axis=1)

        i_dt = np.stack([(i_cust * (phases == p)).sum(axis=1) for p in range(3)], axis=1)
        slack += np.maximum(0.0, np.abs(i_dt) - limits.i_dt_max).sum(axis=1)
        s_dt = self.v0[None, :] * np.conj(i_dt)
        pi = _batch_ptp(s_dt)
        return pi + limits.mb * slack, pi, slack


def _make_kernel(
    snapshot: CaseSnapshot,
    method: str,
    profile: np.ndarray | None = None,
    fit: AffineFit | None = None,
    q_adjust: np.ndarray | None = None,
):
    if method == "fixv":
        return _FixvKernel(snapshot, profile=profile, q_adjust=q_adjust)
    if method == "lbfm":
        return _LbfmKernel(snapshot, q_adjust=q_adjust)
    if method == "linv":
        return _LinvKernel(snapshot, fit=fit, q_adjust=q_adjust)
    raise ValueError(f"unknown formulation {method!r}")
