"""Exact power-flow solver: hand oracles, conservation, error reporting."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from phasebal.netmodel import build_snapshot
from phasebal.powerflow import (
    NonConvergenceError,
    PhaseAssignment,
    VoltageCollapseError,
    check_assignment,
    customer_current,
    power_balance_residual,
    solve_utpf,
)

from conftest import two_bus_network


def snapshot_for(network, p_pu, q_pu=None, adjustable=()):
    from phasebal.netmodel import CaseSnapshot

    n = network.n_customers
    q = np.zeros(n) if q_pu is None else np.asarray(q_pu, dtype=float)
    return CaseSnapshot(
        network=network,
        period=0,
        p_pu=np.asarray(p_pu, dtype=float),
        q_pu=q,
        q_lo_pu=np.zeros(n),
        q_hi_pu=np.zeros(n),
        adjustable_idx=tuple(adjustable),
    )


class TestPhaseAssignment:
    def test_rejects_bad_indices(self):
        with pytest.raises(ValueError, match="0, 1 or 2"):
            PhaseAssignment((0, 3))

    def test_one_hot(self):
        eps = PhaseAssignment((0, 2, 1)).one_hot()
        assert eps.shape == (3, 3)
        assert np.array_equal(eps, [[1, 0, 0], [0, 0, 1], [0, 1, 0]])

    def test_with_phases_replaces_positions(self):
        asg = PhaseAssignment((0, 1, 2)).with_phases([2, 0], [0, 1])
        assert asg.phases == (1, 1, 0)

    def test_initial_reads_customer_phases(self, network):
        asg = PhaseAssignment.initial(network)
        assert len(asg) == network.n_customers
        assert asg.phases == tuple(c.initial_phase for c in network.customers)

    def test_check_assignment_guards_switchless_moves(self, network, demands):
        snap = build_snapshot(network, demands, 0)
        initial = PhaseAssignment.initial(network)
        fixed = next(
            k for k in range(network.n_customers) if k not in snap.adjustable_idx
        )
        moved = initial.with_phases([fixed], [(initial.phases[fixed] + 1) % 3])
        with pytest.raises(ValueError, match="no switch"):
            check_assignment(snap, moved)
        movable = snap.adjustable_idx[0]
        check_assignment(
            snap, initial.with_phases([movable], [(initial.phases[movable] + 1) % 3])
        )

    def test_check_assignment_length(self, network, demands):
        snap = build_snapshot(network, demands, 0)
        with pytest.raises(ValueError, match="covers"):
            check_assignment(snap, PhaseAssignment((0, 1)))


class TestCustomerCurrent:
    def test_constant_pq_injection(self):
        out = customer_current(0.01 + 0.005j, 1.05 + 0j, [1.0, 0.0, 0.0])
        assert out.values[1] == 0 and out.values[2] == 0
        assert out.values[0] == pytest.approx((0.01 - 0.005j) / 1.05)

    def test_zero_power_needs_no_voltage(self):
        out = customer_current(0.0, 0.0, [0.0, 1.0, 0.0])
        assert np.array_equal(out.values, np.zeros(3))

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="one-hot"):
            customer_current(0.01, 1.0, [1.0, 1.0, 0.0])
        with pytest.raises(Exception, match="zero voltage"):
            customer_current(0.01, 0.0, [1.0, 0.0, 0.0])


class TestScalarOracle:
    def test_resistive_single_phase_closed_form(self):
        # Uncoupled resistive line, real load on phase a, real source voltage:
        # V = v0 - r * s / V  =>  V = (v0 + sqrt(v0^2 - 4 r s)) / 2.
        r, s, v0 = 0.02, 0.05, 1.05
        network = two_bus_network(z_self=r, z_mutual=0.0)
        network = replace(
            network,
            v0=type(network.v0)(np.array([v0, v0, v0], dtype=complex)),
        )
        snap = snapshot_for(network, [s])
        sol = solve_utpf(snap, PhaseAssignment((0,)), tol=1e-14)
        expect = (v0 + math.sqrt(v0 * v0 - 4 * r * s)) / 2.0
        assert abs(sol.v[1, 0] - expect) <= 1e-12
        assert abs(sol.v[1, 0] * np.conj(sol.i_lines[0, 0]) - s) <= 1e-12
        # DT power covers the load plus the line's resistive loss.
        loss = r * abs(sol.i_lines[0, 0]) ** 2
        assert abs(sol.s_dt.sum() - s - loss) <= 1e-12

    def test_single_customer_first_iteration_current(self):
        # Flat-start current conj(s)/conj(v0) is the first ladder injection.
        network = two_bus_network()
        snap = snapshot_for(network, [0.01], [0.005])
        sol = solve_utpf(snap, PhaseAssignment((0,)))
        expect0 = (0.01 - 0.005j) / 1.05
        assert abs(sol.i_lines[0, 0] - expect0) <= 2e-4  # near, then refined
        assert sol.mismatch <= 1e-8


class TestZeroLoad:
    def test_voltages_pin_to_source(self, network, demands):
        snap = build_snapshot(network, demands, 0)
        empty = replace(
            snap,
            p_pu=np.zeros(network.n_customers),
            q_pu=np.zeros(network.n_customers),
        )
        sol = solve_utpf(empty, PhaseAssignment.initial(network))
        assert sol.mismatch == 0.0
        assert np.array_equal(sol.v, np.tile(network.v0.values, (network.n_buses, 1)))
        assert np.array_equal(sol.s_dt, np.zeros(3, dtype=complex))


class TestBundledConvergence:
    def test_period_40_state(self, network, demands):
        snap = build_snapshot(network, demands, 40)
        sol = solve_utpf(snap, PhaseAssignment.initial(network))
        assert sol.mismatch <= 1e-8
        assert sol.iterations < 60
        assert len(sol.mismatch_history) == sol.iterations
        assert sol.mismatch_history[-1] <= sol.mismatch_history[0]
        assert power_balance_residual(sol, snap) <= 1e-8
        assert np.all(sol.vm > 0.9) and np.all(sol.vm < 1.1)

    def test_kirchhoff_from_raw_line_list(self, network, demands):
        # Independent KCL check: per bus and phase, line flows out of the bus
        # plus local customer injections equal flows into it. Uses only the
        # Line records, not the solver's cached geometry.
        snap = build_snapshot(network, demands, 40)
        asg = PhaseAssignment.initial(network)
        sol = solve_utpf(snap, asg)
        bus_index = {b: i for i, b in enumerate(sol.bus_ids)}
        balance = np.zeros((network.n_buses, 3), dtype=complex)
        for li, line in enumerate(network.lines):
            balance[bus_index[line.from_bus]] -= sol.i_lines[li]
            balance[bus_index[line.to_bus]] += sol.i_lines[li]
        for k, cust in enumerate(network.customers):
            vc = sol.v[bus_index[cust.bus], asg.phases[k]]
            balance[bus_index[cust.bus], asg.phases[k]] -= np.conj(snap.s_pu[k] / vc)
        balance[bus_index[network.root]] = 0.0  # root slack supplies the feeder
        assert np.max(np.abs(balance)) <= 1e-9

    def test_voltage_accessor(self, network, demands):
        snap = build_snapshot(network, demands, 40)
        sol = solve_utpf(snap, PhaseAssignment.initial(network))
        far = sol.bus_ids[-1]
        assert np.array_equal(
            sol.voltage(far).values, sol.v[sol.bus_ids.index(far)]
        )


class TestReactiveAdjustment:
    def test_bounds_enforced(self, network, demands):
        snap = build_snapshot(network, demands, 40)
        asg = PhaseAssignment.initial(network)
        with pytest.raises(ValueError, match="one entry per customer"):
            solve_utpf(snap, asg, q_adjust=np.zeros(3))
        with pytest.raises(ValueError, match="reactive bounds"):
            solve_utpf(snap, asg, q_adjust=np.full(network.n_customers, 1e-3))

    def test_adjustment_shifts_served_power(self, network, demands):
        from phasebal.netmodel import DEFAULT_SCENARIO

        scenario = replace(DEFAULT_SCENARIO, pv_q_control=True)
        snap = build_snapshot(network, demands, 48, scenario)
        asg = PhaseAssignment.initial(network)
        dq = np.where(snap.q_hi_pu > 0, snap.q_hi_pu, 0.0)
        sol = solve_utpf(snap, asg, q_adjust=dq)
        assert np.allclose(sol.s_cust, snap.s_pu + 1j * dq)
        assert power_balance_residual(sol, snap) <= 1e-8


class TestFailureReporting:
    def test_voltage_collapse_is_typed(self):
        network = two_bus_network(z_self=0.5 + 1.5j, z_mutual=0.0)
        snap = snapshot_for(network, [2.0])
        with pytest.raises(VoltageCollapseError):
            solve_utpf(snap, PhaseAssignment((0,)))

    def test_nonconvergence_carries_state(self, network, demands):
        snap = build_snapshot(network, demands, 40)
        with pytest.raises(NonConvergenceError) as info:
            solve_utpf(snap, PhaseAssignment.initial(network), max_iterations=1)
        assert info.value.iterations == 1
        assert info.value.mismatch > 1e-8
