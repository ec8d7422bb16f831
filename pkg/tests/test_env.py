"""Tests for ecrl.env (TactilePivot)."""

import csv
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecrl.env import (
    CLOSE,
    TANGENT_H,
    SystemState,
    TactilePivot,
    TerminationFlags,
    TrajectoryRecorder,
    check_termination,
    compute_reward,
    contact_directions,
    make_grasp_set,
    sample_goal,
)
from ecrl.errors import SimulationFault
from ecrl.manifold import (
    IDENTITY,
    geodesic_distance,
    identity_goal_index,
    octahedral_group,
    quat_from_axis_angle,
    quat_log,
    relative_rotation,
)
from ecrl.models import EnvSettings, ObjectSpec, RewardSettings
from tests.conftest import make_tiny_config

R = RewardSettings()
X_REF = np.zeros((1, 3))
Q_REF = np.zeros((1, 12))


def _reward(theta_prev, theta, x_offset=0.0, q_offset=0.0):
    x = X_REF + np.array([[x_offset, 0.0, 0.0]])
    q = Q_REF + q_offset
    return float(compute_reward(np.array([theta_prev]), np.array([theta]), x, q, X_REF, Q_REF, R)[0])


def _run(env, actions):
    """Step env through a list of action arrays; returns per-step copies of (x, rot, obs, reward)."""
    out = []
    for action in actions:
        state, obs, rewards, _ = env.step(action)
        out.append((state.x.copy(), state.rot.copy(), obs.copy(), rewards.copy()))
    return out


class TestReward:
    """Hand-computed reward cases with the default coefficients."""

    def test_within_clip(self):
        """Test a 0.05 rad decrease at the references gives 50."""
        assert _reward(1.0, 0.95) == pytest.approx(50.0)

    def test_clip_branch(self):
        """Test a 0.5 rad decrease is capped at 1000 * 0.1."""
        assert _reward(1.0, 0.5) == pytest.approx(100.0)

    def test_no_motion_at_nominal(self):
        """Test no change at the references gives zero."""
        assert _reward(0.7, 0.7) == 0.0

    def test_pure_penalties(self):
        """Test position and joint penalties without rotation."""
        expected = -(0.1 * (50.0 * 0.01) ** 4) - 2000.0 * 0.1 ** 4
        assert _reward(0.3, 0.3, x_offset=0.01, q_offset=0.1) == pytest.approx(expected)

    def test_position_clip(self):
        """Test the position deviation is clipped at 0.3 m."""
        assert _reward(0.3, 0.3, x_offset=0.5) == pytest.approx(-0.1 * (50.0 * 0.3) ** 4)

    def test_moving_away_is_negative(self):
        """Test an angle increase is penalized linearly."""
        assert _reward(0.5, 0.6) == pytest.approx(-100.0)

    @given(
        st.floats(min_value=0.0, max_value=np.pi),
        st.floats(min_value=0.0, max_value=np.pi),
        st.floats(min_value=0.0, max_value=1.0),
    )
    def test_rotation_term_bounded(self, theta_prev, theta, x_offset):
        """Test the reward never exceeds 100 per step."""
        assert _reward(theta_prev, theta, x_offset=x_offset) <= 100.0 + 1e-9


class TestSampleGoal:
    """Tests for goal resampling."""

    def test_never_current(self, rng):
        """Test the current goal is never returned."""
        for current in range(24):
            draws = {sample_goal(rng, current) for _ in range(200)}
            assert current not in draws
            assert draws <= set(range(24))

    def test_uniform_over_others(self):
        """Test frequencies are within 4 sigma of 1/23."""
        rng = np.random.default_rng(5)
        n = 23_000
        counts = np.bincount([sample_goal(rng, 4) for _ in range(n)], minlength=24)
        assert counts[4] == 0
        p = 1.0 / 23.0
        sigma = np.sqrt(n * p * (1.0 - p))
        others = np.delete(counts, 4)
        assert np.all(np.abs(others - n * p) < 4.0 * sigma)

    def test_without_current_covers_all(self, rng):
        """Test the unconditioned draw covers all 24 goals."""
        assert {sample_goal(rng) for _ in range(2000)} == set(range(24))


class TestCheckTermination:
    """Tests for episode and goal flags."""

    def _state(self, n=1):
        state = SystemState.empty(n)
        state.goal = np.tile(IDENTITY, (n, 1))
        return state

    def test_dropped(self):
        """Test |x| = 0.11 m is a drop and 0.09 m is not."""
        state = self._state(2)
        state.x[0] = [0.0, 0.0, -0.11]
        state.x[1] = [0.09, 0.0, 0.0]
        flags = check_termination(state, None, EnvSettings())
        np.testing.assert_array_equal(flags.dropped, [True, False])

    def test_success_at_interval_end(self):
        """Test 0.39 rad at the interval end is a success and 0.41 rad a timeout."""
        settings = EnvSettings()
        state = self._state(2)
        state.rot[0] = quat_from_axis_angle([0, 0, 1], 0.39)
        state.rot[1] = quat_from_axis_angle([0, 0, 1], 0.41)
        state.t_in_goal[:] = settings.goal_steps
        flags = check_termination(state, None, settings)
        np.testing.assert_array_equal(flags.goal_success, [True, False])
        np.testing.assert_array_equal(flags.goal_timeout, [False, True])
        np.testing.assert_array_equal(flags.done, [False, True])

    def test_success_only_at_interval_end(self):
        """Test reaching the goal early is not yet a success."""
        state = self._state()
        state.t_in_goal[:] = 10
        flags = check_termination(state, None, EnvSettings())
        assert not flags.goal_success[0]
        assert not flags.goal_timeout[0]

    def test_episode_timeout(self):
        """Test the episode ends after 20 s of control steps."""
        state = self._state(2)
        state.episode_t[:] = [199, 200]
        flags = check_termination(state, None, EnvSettings())
        np.testing.assert_array_equal(flags.episode_timeout, [False, True])

    def test_episode_timeout_disabled(self):
        """Test a null max_episode_seconds never times out."""
        state = self._state()
        state.episode_t[:] = 10_000
        flags = check_termination(state, None, EnvSettings(max_episode_seconds=None))
        assert not flags.episode_timeout[0]

    @pytest.mark.parametrize("mode,expected", [("train", True), ("eval", False)])
    def test_divergence_train_only(self, mode, expected):
        """Test an estimate pi/2 away diverges in train mode only."""
        state = self._state()
        estimate = SimpleNamespace(rot=quat_from_axis_angle([1, 0, 0], np.pi / 2)[None, :])
        flags = check_termination(state, estimate, EnvSettings(), mode=mode)
        assert bool(flags.estimator_divergence[0]) is expected

    def test_divergence_can_be_disabled(self):
        """Test divergence=False suppresses the flag in train mode."""
        state = self._state()
        estimate = SimpleNamespace(rot=quat_from_axis_angle([1, 0, 0], np.pi / 2)[None, :])
        flags = check_termination(state, estimate, EnvSettings(), divergence=False)
        assert not flags.estimator_divergence[0]

    def test_success_is_not_done(self):
        """Test a success alone does not end the episode."""
        flags = TerminationFlags.none(1)
        flags.goal_success[0] = True
        assert not flags.done[0]

    def test_symmetry_quotient(self):
        """Test the quotient metric accepts a symmetric equivalent of the goal."""
        state = self._state()
        state.rot[0] = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        state.t_in_goal[:] = 50
        group = octahedral_group()
        assert not check_termination(state, None, EnvSettings()).goal_success[0]
        assert check_termination(state, None, EnvSettings(), symmetries=group).goal_success[0]


class TestGeometry:
    """Tests for contact directions and the grasp set."""

    def test_contact_directions(self):
        """Test four unit directions 90 degrees apart, tilted 30 degrees down."""
        c, t_h, t_v = contact_directions(30.0)
        np.testing.assert_allclose(np.linalg.norm(c, axis=-1), 1.0)
        np.testing.assert_allclose(c[:, 2], -0.5, atol=1e-12)
        np.testing.assert_allclose(c[0, :2] @ c[1, :2], 0.0, atol=1e-12)
        np.testing.assert_allclose(np.sum(c * t_h, axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.sum(c * t_v, axis=-1), 0.0, atol=1e-12)

    def test_grasp_set(self):
        """Test the grasp set starts with the nominal pose and is reproducible."""
        settings = EnvSettings()
        x, rot = make_grasp_set(settings, ObjectSpec.preset("cube"))
        assert x.shape == (16, 3)
        np.testing.assert_array_equal(x[0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(rot[0], IDENTITY)
        assert np.all(np.abs(x[1:]) <= settings.grasp_position_jitter)
        x2, rot2 = make_grasp_set(settings, ObjectSpec.preset("cube"))
        np.testing.assert_array_equal(x, x2)
        np.testing.assert_array_equal(rot, rot2)

    def test_nominal_grasp_follows_com(self):
        """Test the nominal position equals the centre-of-mass offset."""
        x, _ = make_grasp_set(EnvSettings(), ObjectSpec.preset("L"))
        np.testing.assert_allclose(x[0], [0.01, 0.01, 0.0])


class TestReset:
    """Tests for TactilePivot.reset."""

    def test_reset_is_reproducible(self, tiny_config):
        """Test the same seed gives the same reset state and observation."""
        a, b = TactilePivot(tiny_config, 4, seed=3), TactilePivot(tiny_config, 4, seed=3)
        state_a, obs_a = a.reset()
        state_b, obs_b = b.reset()
        np.testing.assert_array_equal(state_a.x, state_b.x)
        np.testing.assert_array_equal(state_a.goal_index, state_b.goal_index)
        np.testing.assert_array_equal(obs_a, obs_b)

    def test_reset_state(self, tiny_config):
        """Test a fresh episode: goal set, counters zero, filter at q."""
        env = TactilePivot(tiny_config, 6, seed=0)
        state, obs = env.reset()
        assert obs.shape == (6, 144)
        assert np.all((state.goal_index >= 0) & (state.goal_index < 24))
        np.testing.assert_array_equal(state.goal, octahedral_group()[state.goal_index])
        np.testing.assert_array_equal(state.t_in_goal, 0)
        np.testing.assert_array_equal(state.episode_t, 0)
        np.testing.assert_array_equal(state.q_d_filt, state.q)
        assert np.all(np.abs(state.q) <= tiny_config.env.joint_limit)

    def test_all_fingers_engaged(self, tiny_config):
        """Test every closing joint presses past its contact angle after reset."""
        env = TactilePivot(tiny_config, 16, seed=0)
        state, _ = env.reset()
        theta_c = env.contact_angles(state.x, state.rot, env.dr.size_scale)
        assert np.all(state.q[:, CLOSE] > theta_c)

    def test_partial_reset(self, tiny_config):
        """Test resetting a subset leaves the other rows untouched."""
        env = TactilePivot(tiny_config, 4, seed=0)
        env.reset()
        env.step(np.zeros((4, 12)))
        before = env.state.copy()
        env.reset([1])
        assert env.state.episode_t[1] == 0
        np.testing.assert_array_equal(env.state.episode_t[[0, 2, 3]], before.episode_t[[0, 2, 3]])
        np.testing.assert_array_equal(env.state.x[[0, 2, 3]], before.x[[0, 2, 3]])

    def test_pinned_goals(self, tiny_config):
        """Test pin_goals overrides the sampled goal by row."""
        env = TactilePivot(tiny_config, 3, seed=0)
        env.pin_goals(np.array([5, 6, 7]))
        state, _ = env.reset()
        np.testing.assert_array_equal(state.goal_index, [5, 6, 7])
        env.pin_goals(None)
        assert env.goal_override is None

    def test_stability_probe(self):
        """Test 1000 resets survive 10 zero-action steps without a drop."""
        config = make_tiny_config()
        env = TactilePivot(config, 1000, seed=11)
        env.reset()
        dropped = np.zeros(1000, dtype=bool)
        for _ in range(10):
            _, _, _, flags = env.step(np.zeros((1000, 12)))
            dropped |= flags.dropped
        assert not dropped.any()


class TestStep:
    """Tests for TactilePivot.step."""

    def test_zero_action_equilibrium(self, noiseless_config):
        """Test the object barely moves under zero action for 50 steps."""
        env = TactilePivot(noiseless_config, 8, seed=0)
        state, _ = env.reset()
        x0, rot0 = state.x.copy(), state.rot.copy()
        for _ in range(50):
            state, _, _, _ = env.step(np.zeros((8, 12)))
        assert np.all(np.linalg.norm(state.x - x0, axis=-1) < 1e-3)
        assert np.all(geodesic_distance(state.rot, rot0) < 1e-3)

    def test_open_hand_drops(self, tiny_config):
        """Test opening every finger drops the object within 2 s."""
        env = TactilePivot(tiny_config, 8, seed=0)
        env.reset()
        action = np.zeros((8, 12))
        action[:, CLOSE] = -tiny_config.env.joint_limit
        dropped = np.zeros(8, dtype=bool)
        for _ in range(20):
            _, _, _, flags = env.step(action)
            dropped |= flags.dropped
        assert dropped.all()

    def test_tangential_command_rotates(self, noiseless_config):
        """Test a tangential residual turns the object."""
        env = TactilePivot(noiseless_config, 2, seed=0)
        state, _ = env.reset()
        rot0 = state.rot.copy()
        action = np.zeros((2, 12))
        action[:, TANGENT_H] = 0.3
        for _ in range(5):
            state, _, _, _ = env.step(action)
        assert np.all(geodesic_distance(state.rot, rot0) > 0.05)

    def test_two_finger_variance(self):
        """Test two-finger rotation is at least 5x as variable across seeds as four-finger."""
        config = make_tiny_config(randomization__enabled=False, env__n_grasps=1)

        def final_rotations(open_fingers):
            env = TactilePivot(config, 100, seed=21)
            state, _ = env.reset()
            rot0 = state.rot.copy()
            action = np.zeros((100, 12))
            action[:, TANGENT_H] = 0.2
            for finger in open_fingers:
                action[:, CLOSE[finger]] = -config.env.joint_limit
                action[:, TANGENT_H[finger]] = 0.0
            for _ in range(20):
                state, _, _, _ = env.step(action)
            return quat_log(relative_rotation(rot0, state.rot))

        four = np.var(final_rotations([]), axis=0).sum()
        two = np.var(final_rotations([1, 3]), axis=0).sum()
        assert two > 1e-6
        assert two >= 5.0 * four

    def test_x3_weakly_observable(self, noiseless_config):
        """Test d(obs)/d(x3) is at most 0.1 of d(obs)/d(x1) in the noise-free observation."""
        env = TactilePivot(noiseless_config, 1, seed=0)
        state, _ = env.reset()
        action = np.zeros(12)
        eps = 1e-5

        def sensitivity(axis):
            plus, minus = state.copy(), state.copy()
            plus.x[0, axis] += eps
            minus.x[0, axis] -= eps
            diff = env.observe_noise_free(plus, action) - env.observe_noise_free(minus, action)
            return np.linalg.norm(diff) / (2 * eps)

        assert sensitivity(2) <= 0.1 * sensitivity(0)
        assert sensitivity(0) > 0.0

    def test_batch_equals_single(self, tiny_config, rng):
        """Test stepping 4 envs together equals stepping each alone."""
        actions = [rng.uniform(-0.2, 0.2, size=(4, 12)) for _ in range(5)]
        batch = TactilePivot(tiny_config, 4, seed=9)
        batch.reset()
        together = _run(batch, actions)
        for i in range(4):
            single = TactilePivot(tiny_config, 1, seed=9, env_offset=i)
            single.reset()
            alone = _run(single, [a[i : i + 1] for a in actions])
            for step_batch, step_single in zip(together, alone):
                for array_batch, array_single in zip(step_batch, step_single):
                    np.testing.assert_allclose(array_batch[i : i + 1], array_single, rtol=1e-10, atol=1e-12)

    def test_workers_do_not_change_results(self, tiny_config, rng):
        """Test the threaded stepper matches the serial one."""
        actions = [rng.uniform(-0.2, 0.2, size=(6, 12)) for _ in range(4)]
        serial = TactilePivot(tiny_config, 6, seed=2)
        threaded = TactilePivot(tiny_config, 6, seed=2, n_workers=3)
        serial.reset()
        threaded.reset()
        for a, b in zip(_run(serial, actions), _run(threaded, actions)):
            for array_a, array_b in zip(a, b):
                np.testing.assert_allclose(array_a, array_b, rtol=1e-10, atol=1e-12)

    def test_goal_timeout_after_interval(self, noiseless_config):
        """Test an unreached goal times out exactly after 50 steps."""
        env = TactilePivot(noiseless_config, 1, seed=0)
        env.reset()
        far = next(i for i, g in enumerate(octahedral_group()) if geodesic_distance(g, IDENTITY) > 3.0)
        env.set_goal([0], far)
        for step in range(1, 51):
            _, _, _, flags = env.step(np.zeros((1, 12)))
            assert bool(flags.goal_timeout[0]) is (step == 50)

    def test_success_resamples_goal(self):
        """Test reaching the goal at the interval end resamples it immediately."""
        config = make_tiny_config(randomization__enabled=False, env__n_grasps=1)
        env = TactilePivot(config, 1, seed=0)
        env.reset()
        env.set_goal([0], identity_goal_index())
        for _ in range(50):
            state, _, _, flags = env.step(np.zeros((1, 12)))
        assert flags.goal_success[0]
        assert not flags.done[0]
        assert state.goal_index[0] != identity_goal_index()
        assert state.t_in_goal[0] == 0

    def test_non_finite_action(self, tiny_config):
        """Test a NaN action raises SimulationFault naming the env."""
        env = TactilePivot(tiny_config, 3, seed=0, env_offset=10)
        env.reset()
        action = np.zeros((3, 12))
        action[1, 0] = np.nan
        with pytest.raises(SimulationFault) as exc_info:
            env.step(action)
        assert exc_info.value.env_ids == [11]

    def test_wrong_action_shape(self, tiny_config):
        """Test a misshaped action is rejected."""
        env = TactilePivot(tiny_config, 2, seed=0)
        env.reset()
        with pytest.raises(ValueError):
            env.step(np.zeros((2, 11)))

    def test_joint_limits_respected(self, tiny_config):
        """Test extreme commands keep joints within limits."""
        env = TactilePivot(tiny_config, 4, seed=0)
        env.reset()
        for _ in range(10):
            state, _, _, _ = env.step(np.full((4, 12), 5.0))
        assert np.all(np.abs(state.q) <= tiny_config.env.joint_limit + 1e-12)

    def test_wrench_kicks_rotate(self):
        """Test enabled kicks move an otherwise static object."""
        config = make_tiny_config(
            randomization__enabled=False,
            randomization__wrench_enabled=True,
            randomization__wrench_probability=1.0,
        )
        env = TactilePivot(config, 4, seed=0)
        state, _ = env.reset()
        rot0 = state.rot.copy()
        state, _, _, _ = env.step(np.zeros((4, 12)))
        assert np.all(geodesic_distance(state.rot, rot0) > 1e-8)


class TestStateDict:
    """Tests for simulator checkpointing."""

    def test_round_trip_continues_identically(self, tiny_config, rng):
        """Test a restored simulator continues bit-for-bit."""
        actions = [rng.uniform(-0.2, 0.2, size=(3, 12)) for _ in range(5)]
        env = TactilePivot(tiny_config, 3, seed=4)
        env.reset()
        _run(env, actions[:3])
        arrays, meta = env.state_dict()
        arrays = {k: v.copy() for k, v in arrays.items()}
        expected = _run(env, actions[3:])

        restored = TactilePivot(tiny_config, 3, seed=4)
        restored.load_state_dict(arrays, meta)
        for a, b in zip(expected, _run(restored, actions[3:])):
            for array_a, array_b in zip(a, b):
                np.testing.assert_array_equal(array_a, array_b)

    def test_env_count_mismatch(self, tiny_config):
        """Test loading into a different env count fails."""
        env = TactilePivot(tiny_config, 3, seed=4)
        env.reset()
        arrays, meta = env.state_dict()
        with pytest.raises(ValueError):
            TactilePivot(tiny_config, 2, seed=4).load_state_dict(arrays, meta)


class TestTrajectoryRecorder:
    """Tests for CSV trajectory dumps."""

    def test_write(self, tiny_config, temp_dir):
        """Test one row per env and step with the documented columns."""
        env = TactilePivot(tiny_config, 2, seed=0)
        env.reset()
        recorder = TrajectoryRecorder(tiny_config.env.control_dt)
        for step in range(3):
            state, _, rewards, flags = env.step(np.zeros((2, 12)))
            recorder.record([0, 1], step, state, rewards, flags, env.angle_to_goal(state.rot, state.goal))
        path = recorder.write(temp_dir / "traj.csv")

        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 6
        assert {"t", "x1", "qw", "goal_index", "reward", "dropped"} <= set(rows[0])
        assert float(rows[-1]["t"]) == pytest.approx(0.2)
