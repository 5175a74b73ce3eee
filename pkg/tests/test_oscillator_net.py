"""Tests for the two-layer oscillator network.

The closed-form cases below come straight from the governing equations;
dynamic properties are checked against high-resolution reference
integrations and the compiled kernel is cross-checked step-for-step
against the plain-numpy implementations of the same equations.
"""

import math

import numpy as np
import pytest

from oscsep import auditory_maps as am
from oscsep import oscillator_net as net
from oscsep.oscillator_net import (
    ControllerState,
    NetParams,
    SimulationDiverged,
    UNDRIVEN_INPUT,
)

PARAMS = NetParams()


def _frame(values):
    return am.MapFrame(values=values, frame_index=0, kind=am.CAM)


class TestDerivatives:
    def test_rest_state_with_input(self):
        dx, dy = net.oscillator_derivatives(0.0, 0.0, p=0.2, s=0.0, noise=0.0, params=PARAMS)
        assert dx == pytest.approx(2.2, rel=1e-12)
        assert dy == pytest.approx(0.08, rel=1e-12)

    def test_recovery_relaxation(self):
        dx, dy = net.oscillator_derivatives(0.0, 2.0, p=0.0, s=0.0, noise=0.0, params=PARAMS)
        assert dx == pytest.approx(0.0, abs=1e-12)
        assert dy == pytest.approx(0.04, rel=1e-12)

    def test_fixed_point_by_bisection(self):
        # Oracle: 1-D bisection for the zero-input equilibrium, where the
        # cubic nullcline meets the recovery nullcline.
        def g(x):
            return 3 * x - x**3 + 2 - PARAMS.gamma * (1 + math.tanh(x / PARAMS.beta))

        lo, hi = -1.5, -1.0
        assert g(lo) > 0 > g(hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if g(mid) > 0:
                lo = mid
            else:
                hi = mid
        x_star = 0.5 * (lo + hi)
        y_star = PARAMS.gamma * (1 + math.tanh(x_star / PARAMS.beta))
        dx, dy = net.oscillator_derivatives(x_star, y_star, 0.0, 0.0, 0.0, PARAMS)
        assert abs(dx) < 1e-9
        assert abs(dy) < 1e-12

    def test_vectorized(self):
        x = np.array([0.0, 1.0])
        y = np.array([0.0, 1.0])
        dx, dy = net.oscillator_derivatives(x, y, 0.2, 0.0, 0.0, PARAMS)
        assert dx.shape == (2,)


class TestEulerStep:
    def test_single_explicit_step(self):
        params = NetParams(dt=0.01)
        x, y = net.euler_step(np.array([0.0]), np.array([0.0]), 0.2, 0.0, params)
        assert x[0] == pytest.approx(0.022, rel=1e-12)
        assert y[0] == pytest.approx(0.0008, rel=1e-12)

    def test_divergence_guard(self):
        params = NetParams(dt=1.0)
        with pytest.raises(SimulationDiverged):
            x, y = np.array([2.5]), np.array([0.0])
            for _ in range(50):
                x, y = net.euler_step(x, y, 2.0, 0.0, params)

    def test_relaxation_oscillation_jitter(self):
        spikes = net.simulate_single(0.2, 0.005, 250000)
        assert len(spikes) >= 5
        isi = np.diff(spikes)[1:]
        assert (isi.max() - isi.min()) / isi.mean() < 0.01

    def test_euler_matches_reference_at_chosen_dt(self):
        # Spike times at the production dt stay within 2% of a dt/100
        # reference integration of the same trajectory.
        dt = PARAMS.dt
        t_total = 5 * 210.0
        coarse = net.simulate_single(0.2, dt, int(t_total / dt))
        fine = net.simulate_single(0.2, dt / 100, int(t_total / (dt / 100)))
        n = min(len(coarse), len(fine))
        assert n >= 4
        period = float(np.median(np.diff(fine)))
        assert np.max(np.abs(coarse[:n] - fine[:n])) < 0.02 * period

    def test_negative_input_reaches_fixed_point(self):
        # From the slow branch, p = -1 yields a stable equilibrium and no
        # spikes; the dt/100 reference agrees.
        spikes = net.simulate_single(-1.0, 0.005, 100000, x0=-2.0, y0=0.0)
        assert len(spikes) == 0
        fine = net.simulate_single(-1.0, 0.00005, 200000, x0=-2.0, y0=0.0)
        assert len(fine) == 0


class TestLayer1Weights:
    def test_uniform_input_interior(self):
        w = net.layer1_weights(np.zeros((5, 6)), PARAMS)
        assert w.up[2, 3] == pytest.approx(0.0625, rel=1e-12)
        assert w.down[2, 3] == pytest.approx(0.0625, rel=1e-12)

    def test_unit_difference(self):
        p = np.zeros((5, 6))
        p[1, 3] = 1.0
        w = net.layer1_weights(p, PARAMS)
        # receiver (2,3) interior, |dp| = 1 on its up edge
        assert w.up[2, 3] == pytest.approx(0.0625 / math.e, rel=1e-12)

    def test_corner_card(self):
        w = net.layer1_weights(np.zeros((5, 6)), PARAMS)
        assert w.down[0, 0] == pytest.approx(0.125, rel=1e-12)
        assert w.right[0, 0] == pytest.approx(0.125, rel=1e-12)
        assert w.up[0, 0] == 0.0
        assert w.left[0, 0] == 0.0

    def test_edge_card(self):
        w = net.layer1_weights(np.zeros((5, 6)), PARAMS)
        assert w.down[0, 3] == pytest.approx(0.25 / 3, rel=1e-12)

    def test_symmetry_for_equal_cards(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0, 1, (6, 7))
        w = net.layer1_weights(p, PARAMS)
        # Interior-to-interior edges: same Card on both sides.
        for i in range(2, 4):
            for j in range(2, 5):
                assert w.up[i, j] == pytest.approx(w.down[i - 1, j], rel=1e-12)
                assert w.left[i, j] == pytest.approx(w.right[i, j - 1], rel=1e-12)

    def test_accepts_map_frame(self):
        frame = _frame(np.zeros((256, 50)))
        w = net.layer1_weights(frame, PARAMS)
        assert w.up.shape == (50, 256)


class TestLongRange:
    def test_high_channel_gets_zero(self):
        x = np.zeros((50, 256))
        wlr = net.long_range_weights(np.zeros((50, 256)), PARAMS)
        assert net.long_range_coupling(x, wlr, kappa=1, i=10, j=99) == 0.0

    def test_silent_band_gives_zero(self):
        x = np.zeros((50, 256))  # nothing firing
        wlr = net.long_range_weights(np.zeros((50, 256)), PARAMS)
        assert net.long_range_coupling(x, wlr, kappa=1, i=10, j=4) == 0.0

    def test_single_firing_neuron(self):
        p = np.zeros((50, 256))
        wlr = net.long_range_weights(p, PARAMS)
        x = np.zeros((50, 256))
        x[10, 239] = 1.5  # one firing neuron in the high band, |dp| = 0
        val = net.long_range_coupling(x, wlr, kappa=1, i=10, j=4)
        assert val == pytest.approx(0.25 / 32, rel=1e-12)

    def test_csm_mode_disabled(self):
        p = np.zeros((50, 256))
        wlr = net.long_range_weights(p, PARAMS)
        x = np.ones((50, 256))
        assert net.long_range_coupling(x, wlr, kappa=0, i=10, j=4) == 0.0


class TestLayer1Coupling:
    def test_all_quiet(self):
        x = np.zeros((5, 6))
        w = net.layer1_weights(np.zeros((5, 6)), PARAMS)
        s = net.layer1_coupling(x, w, ControllerState(), 0.0, PARAMS, 2, 3)
        assert s == 0.0

    def test_four_firing_neighbors(self):
        x = np.zeros((5, 6))
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            x[2 + di, 3 + dj] = 1.0
        w = net.layer1_weights(np.zeros((5, 6)), PARAMS)
        s = net.layer1_coupling(x, w, ControllerState(), 0.0, PARAMS, 2, 3)
        assert s == pytest.approx(0.25, rel=1e-12)

    def test_active_controller_contribution(self):
        x = np.zeros((5, 6))
        w = net.layer1_weights(np.zeros((5, 6)), PARAMS)
        ctrl = ControllerState(z=1.0, G=-0.1)
        s = net.layer1_coupling(x, w, ctrl, 0.0, PARAMS, 2, 3)
        assert s == pytest.approx(0.005, rel=1e-12)

    def test_heaviside_coupling_bound(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0, 1, (8, 9))
        w = net.layer1_weights(p, PARAMS)
        bound_grid = w.up + w.down + w.left + w.right
        ctrl = ControllerState(z=1.0, G=-0.1)
        for _ in range(20):
            x = rng.uniform(-2.5, 2.5, (8, 9))
            for i in (0, 3, 7):
                for j in (0, 4, 8):
                    s = net.layer1_coupling(x, w, ctrl, 0.0, PARAMS, i, j)
                    bound = bound_grid[i, j] + PARAMS.eta * abs(PARAMS.controller_alpha)
                    assert abs(s) <= bound + 1e-12


class TestController:
    def test_rest_is_fixed_point(self):
        out = net.controller_step(ControllerState(), 0.0, PARAMS, dt=0.01)
        assert out.z == 0.0
        assert out.G == 0.0

    def test_explicit_decay_step(self):
        out = net.controller_step(ControllerState(z=1.0), 0.0, PARAMS, dt=0.01)
        assert out.z == pytest.approx(0.996, rel=1e-12)
        assert out.G == pytest.approx(-0.1, rel=1e-12)

    def test_sustained_activity_closed_form(self):
        # Oracle: z(t) = (1 - exp(-xi t)) / xi under sigma = 1; G switches
        # on when z crosses theta, at t* = -ln(1 - xi*theta) / xi.
        dt = 0.001
        ctrl = ControllerState()
        t_cross = None
        for step in range(1, 20000):
            ctrl = net.controller_step(ctrl, 1.0, PARAMS, dt)
            if t_cross is None and ctrl.G != 0.0:
                t_cross = step * dt
        t_star = -math.log(1 - PARAMS.xi * PARAMS.theta) / PARAMS.xi
        assert t_cross == pytest.approx(t_star, abs=0.01)
        assert ctrl.z == pytest.approx(1.0 / PARAMS.xi, rel=1e-3)
        assert ctrl.G == -0.1


class TestLayer2Input:
    def test_all_silent_column_csm(self):
        params = NetParams(kappa=0)
        wll = net.bin_weights(params)
        assert np.all(wll == 1.0)
        assert net.column_product(np.zeros(50), wll) == 1.0

    def test_single_firing_csm(self):
        params = NetParams(kappa=0)
        wll = net.bin_weights(params)
        col = np.zeros(50)
        col[7] = 2.0
        assert net.column_product(col, wll) == pytest.approx(2.0, rel=1e-12)

    def test_cam_weighting(self):
        wll = net.bin_weights(PARAMS)  # kappa=1: alpha / i, 1-based
        col = np.zeros(50)
        col[1] = 1.0  # bin i=2
        col[3] = 1.0  # bin i=4
        assert net.column_product(col, wll) == pytest.approx(0.125, rel=1e-12)

    def test_clamp(self):
        params = NetParams(kappa=0)
        wll = net.bin_weights(params)
        col = np.full(50, 2.0)
        assert net.column_product(col, wll) == net.PRODUCT_CLAMP

    def test_time_average(self):
        params = NetParams(kappa=0)
        hist = np.zeros((4, 50))
        hist[0, 3] = 2.0  # product 2
        # rows 1..3 silent: product 1 each
        assert net.layer2_input(hist, params) == pytest.approx((2 + 1 + 1 + 1) / 4, rel=1e-12)

    def test_full_history_with_channel_index(self):
        params = NetParams(kappa=0)
        hist = np.zeros((3, 50, 8))
        hist[1, 7, 5] = 2.0
        assert net.layer2_input(hist, params, channel=5) == pytest.approx(4 / 3, rel=1e-12)
        assert net.layer2_input(hist, params, channel=0) == 1.0
        with pytest.raises(ValueError, match="channel index"):
            net.layer2_input(hist, params)


class TestLayer2Weights:
    def test_equal_drives(self):
        w = net.layer2_weights(np.zeros(4), PARAMS)
        off_diag = w[~np.eye(4, dtype=bool)]
        assert np.all(off_diag == pytest.approx(0.2, rel=1e-12))
        assert np.all(np.diag(w) == 0.0)

    def test_unit_difference(self):
        w = net.layer2_weights(np.array([0.0, 1.0]), PARAMS)
        assert w[0, 1] == pytest.approx(0.2 / math.e**2, rel=1e-12)

    def test_half_difference(self):
        w = net.layer2_weights(np.array([0.0, 0.5]), PARAMS)
        assert w[0, 1] == pytest.approx(0.2 / math.e, rel=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        w = net.layer2_weights(rng.uniform(0, 3, 16), PARAMS)
        assert np.array_equal(w, w.T)


class TestSynchronization:
    def test_identical_pair_phase_locks(self):
        # Two mutually coupled oscillators with the same input lock to
        # within 0.05 T inside 10 cycles, starting about 0.1 T apart (the
        # pulse coupling's capture range; antiphase starts converge far
        # more slowly).
        params = NetParams(noise=False)
        period = net.reference_period(0.2, params)
        steps = int(10 * period / params.dt)
        w = np.array([[0.0, 0.0625], [0.0625, 0.0]])
        spikes, _, _ = net.simulate_oscillators(
            [0.0, -1.8], [0.0, 0.3], [0.2, 0.2], w, params, steps, controller=False
        )
        assert len(spikes[0]) >= 3 and len(spikes[1]) >= 3
        assert abs(spikes[0][-1] - spikes[1][-1]) < 0.05 * period

    def test_different_input_groups_desynchronize(self):
        # Two uncoupled pairs with different inputs, shared controller:
        # their phases end up separated by more than 0.2 T.
        params = NetParams(noise=False)
        w = np.zeros((4, 4))
        w[0, 1] = w[1, 0] = 0.2
        w[2, 3] = w[3, 2] = 0.2
        period = net.reference_period(0.2, params)
        steps = int(6.5 * period / params.dt)
        spikes, _, _ = net.simulate_oscillators(
            [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0],
            [0.2, 0.2, 0.5, 0.5], w, params, steps, controller=True,
        )
        isis = np.concatenate([np.diff(s) for s in spikes if len(s) >= 2])
        t_ref = float(np.median(isis))
        last_a = max(spikes[0][-1], spikes[1][-1])
        last_b = max(spikes[2][-1], spikes[3][-1])
        assert abs(last_a - last_b) > 0.2 * t_ref
        # within-group stays tight
        assert abs(spikes[0][-1] - spikes[1][-1]) < 0.05 * t_ref
        assert abs(spikes[2][-1] - spikes[3][-1]) < 0.05 * t_ref

    def test_state_stays_bounded(self):
        params = NetParams(noise=False)
        w = np.full((4, 4), 0.0625)
        np.fill_diagonal(w, 0.0)
        _, x, y = net.simulate_oscillators(
            [0.0, -1.0, -1.8, 0.05], [0.0, 1.0, 4.0, 0.2],
            [0.2, 0.5, 0.9, 1.5], w, params, steps=80000, controller=True,
        )
        assert np.all(np.abs(x) <= 3.0)
        assert np.all(y >= 0.0)


class TestKernelMatchesReference:
    def test_one_step_cross_check(self):
        """The compiled frame kernel must reproduce the numpy equations."""
        rng = np.random.default_rng(123)
        ni, nj = 50, 256
        params = PARAMS
        p1 = rng.uniform(0, 1, (ni, nj))
        frame_vals = p1.T.copy()
        frame = _frame(frame_vals)

        w = net.layer1_weights(frame, params)
        wlr = net.long_range_weights(frame, params)
        wll = net.bin_weights(params)
        w2 = net.layer2_weights(net.ray_positions(frame), params)
        w2sum = np.maximum(w2.sum(axis=1), 1e-12)

        x1 = rng.uniform(-2, 2, (ni, nj))
        y1 = rng.uniform(0, 6, (ni, nj))
        x2 = rng.uniform(-2, 2, nj)
        y2 = rng.uniform(0, 6, nj)

        # --- compiled kernel, one step, noise off, both layers live
        kx1, ky1 = x1.copy(), y1.copy()
        kx2, ky2 = x2.copy(), y2.copy()
        ctrl = np.zeros(4)
        win = 7
        ring_prod = np.zeros((win, nj))
        ring_fire = np.zeros((win, nj), np.uint8)
        run_sum = np.zeros(nj)
        fire_cnt = np.zeros(nj, np.int32)
        drives = np.zeros(nj)
        p2 = np.zeros(nj)
        spk2_t = np.zeros((nj, 8)); spk2_n = np.zeros(nj, np.int32)
        spk1_t = np.zeros((1, 1, 1)); spk1_n = np.zeros((1, 1), np.int32)
        noise1 = np.zeros((1, ni, nj), np.float32)
        noise2 = np.zeros((1, nj), np.float32)
        status = net._frame_chunk(
            kx1, ky1, kx2, ky2, p1, w.up, w.down, w.left, w.right, wlr,
            params.kappa, wll, w2, w2sum, p2, noise1, noise2, ctrl,
            ring_prod, ring_fire, run_sum, fire_cnt, drives, spk2_t, spk2_n,
            spk1_t, spk1_n, False, True, True, True, 0, 1, win,
            UNDRIVEN_INPUT, params.dt, params.epsilon, params.gamma,
            params.beta, params.rho, params.eta, params.controller_alpha,
            params.xi, params.theta, params.zeta,
        )
        assert status == 0

        # --- plain numpy mirror of the same synchronous step
        h1 = (x1 > 0).astype(float)
        prods = np.array([net.column_product(x1[:, j], wll) for j in range(nj)])
        col_active = h1.any(axis=0)
        ref_drives = np.where(col_active, prods, UNDRIVEN_INPUT)
        ref_p2 = ref_drives.copy()

        c1 = net.controller_step(ControllerState(), h1.mean(), params, params.dt)
        c2 = net.controller_step(ControllerState(), (x2 > 0).mean(), params, params.dt)

        h2 = (x2 > 0).astype(float)
        s2 = (h2 @ w2) / w2sum - params.eta * c2.G
        rx2, ry2 = net.euler_step(x2, y2, ref_p2, s2, params)

        up = np.zeros_like(h1); up[1:] = h1[:-1]
        down = np.zeros_like(h1); down[:-1] = h1[1:]
        left = np.zeros_like(h1); left[:, 1:] = h1[:, :-1]
        right = np.zeros_like(h1); right[:, :-1] = h1[:, 1:]
        s1 = w.up * up + w.down * down + w.left * left + w.right * right
        s1 -= params.eta * c1.G
        lr = np.einsum("ijk,ik->ij", wlr, h1[:, net.HIGH_BAND_START:])
        s1[:, : net.LOW_CHANNELS] += params.kappa * lr
        rx1, ry1 = net.euler_step(x1, y1, p1, s1, params)

        assert np.allclose(drives, ref_drives, rtol=1e-12, atol=1e-13)
        assert np.allclose(ctrl[0], c1.z, rtol=1e-12) and ctrl[1] == c1.G
        assert np.allclose(ctrl[2], c2.z, rtol=1e-12) and ctrl[3] == c2.G
        assert np.allclose(kx2, rx2, rtol=1e-12, atol=1e-13)
        assert np.allclose(ky2, ry2, rtol=1e-12, atol=1e-13)
        assert np.allclose(kx1, rx1, rtol=1e-12, atol=1e-13)
        assert np.allclose(ky1, ry1, rtol=1e-12, atol=1e-13)


@pytest.fixture(scope="module")
def fast_params():
    return NetParams(steps_per_frame=16000, seed=0)


class TestSimulateFrame:

    def test_determinism(self, fast_params):
        vals = np.zeros((256, 50))
        vals[:, 0] = 0.6
        vals[40:60, 2] = 0.9
        frame = _frame(vals)
        r1, g1 = net.simulate_frame(frame, fast_params, rng=np.random.default_rng(5))
        r2, g2 = net.simulate_frame(frame, fast_params, rng=np.random.default_rng(5))
        assert np.array_equal(g1.labels, g2.labels)
        for a, b in zip(r1.layer2, r2.layer2):
            assert np.array_equal(a, b)

    def test_all_zero_frame_is_silent(self, fast_params):
        record, grouping = net.simulate_frame(
            _frame(np.zeros((256, 50))), fast_params, rng=np.random.default_rng(7)
        )
        assert sum(len(s) for s in record.layer2) == 0
        assert grouping.num_groups == 1
        assert grouping.silent_group == 0
        assert np.all(grouping.labels == 0)

    def test_uniform_frame_single_group(self, fast_params):
        record, grouping = net.simulate_frame(
            _frame(np.full((256, 50), 0.6)), fast_params, rng=np.random.default_rng(9)
        )
        silent = (
            set()
            if grouping.silent_group is None
            else set(grouping.channels_of(grouping.silent_group))
        )
        assert not silent
        assert grouping.num_groups == 1

    def test_two_band_frame_two_groups(self, fast_params):
        vals = np.zeros((256, 50))
        vals[:, 0] = 0.8
        vals[60:100, 2] = 1.0   # band A, ray in pooled bin 2
        vals[160:200, 7] = 1.0  # band B, ray in pooled bin 7
        record, grouping = net.simulate_frame(
            _frame(vals), fast_params, rng=np.random.default_rng(11)
        )
        la = set(grouping.labels[60:100].tolist())
        lb = set(grouping.labels[160:200].tolist())
        assert len(la) == 1 and len(lb) == 1 and la != lb

    def test_layer1_recording(self, fast_params):
        vals = np.full((256, 50), 0.5)
        record, _ = net.simulate_frame(
            _frame(vals), fast_params, rng=np.random.default_rng(13), record_layer1=True
        )
        assert record.layer1 is not None
        assert len(record.layer1) > 0
        times = next(iter(record.layer1.values()))
        assert np.all(np.diff(times) > 0)


class TestGroupByPhase:
    def test_no_spikes(self):
        g = net.group_by_phase([np.array([])] * 4, t_end=100.0)
        assert g.num_groups == 1 and g.silent_group == 0

    def test_two_clusters_and_silent(self):
        spikes = [
            np.array([10.0, 110.0]),
            np.array([11.0, 111.0]),
            np.array([60.0, 160.0]),
            np.array([61.0, 161.0]),
            np.array([]),
        ]
        g = net.group_by_phase(spikes, t_end=200.0)
        assert g.num_groups == 3
        assert g.labels[0] == g.labels[1]
        assert g.labels[2] == g.labels[3]
        assert g.labels[0] != g.labels[2]
        assert g.labels[4] == g.silent_group

    def test_chain_threshold(self):
        # gaps below 0.1 T chain channels together
        spikes = [np.array([100.0, 200.0]), np.array([102.0, 202.0]), np.array([130.0, 230.0])]
        g = net.group_by_phase(spikes, t_end=240.0)
        assert g.labels[0] == g.labels[1] != g.labels[2]


class TestNetParams:
    def test_published_defaults(self):
        p = NetParams()
        assert (p.epsilon, p.gamma, p.beta, p.rho) == (0.02, 4.0, 0.1, 0.02)
        assert (p.controller_alpha, p.xi, p.eta, p.theta, p.zeta) == (-0.1, 0.4, 0.05, 0.9, 0.2)
        assert p.mu == 2.0 and p.lam == 1.0 and p.layer_weight_alpha == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            NetParams(dt=0.0)
        with pytest.raises(ValueError):
            NetParams(kappa=2)

    def test_kind_switch(self):
        assert net.params_for_kind(am.CAM).kappa == 1
        assert net.params_for_kind(am.CSM).kappa == 0
