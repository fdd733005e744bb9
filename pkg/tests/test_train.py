"""Tests for the optimizer, sampling, the training loop and curricula"""

from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from src.engine import train
from src.engine.autodiff import ParamLayout, ParamVector, Tape
from src.engine.checkpoint import load_checkpoint
from src.engine.errors import InvalidProblem, MarchAborted, NonFiniteGradient, NumericalOverflow, ShapeError
from src.engine.metrics import MetricsWriter
from src.engine.nets import build_network, predict
from src.engine.oracle import uniform_grid
from src.engine.problems import get_problem, residual_values
from src.engine.train import (
    AdamSettings,
    ContinuationPlan,
    LearningRateSchedule,
    StitchedSolution,
    TrainState,
    WindowPlan,
    adam_step,
    continue_parameter,
    evaluate_losses,
    ntk_statistics,
    run_curriculum,
    sample_batch,
    sample_collocation,
    time_march,
    train_window,
)
from src.engine.weighting import LossWeights, chunk_index

pytestmark = pytest.mark.train


def scalar_state(value=1.0, learning_rate=1e-3):
    layout = ParamLayout.build([("theta", (1,))])
    params = ParamVector(layout, [value])
    return TrainState(
        params=params,
        m=params.zeros_like(),
        v=params.zeros_like(),
        weights=LossWeights.initial(["ic", "r"], chunks=1),
        rng=np.random.default_rng(0),
        schedule=LearningRateSchedule(base=learning_rate),
    )


def fresh_run(config):
    problem = get_problem(config.problem.name, config.problem.overrides, config.problem.t_max)
    net = build_network(config.network, config.seed, time_length=problem.duration)
    return problem, net, TrainState.initial(net, config, problem.loss_terms)


@pytest.mark.unit
class TestOptimizer:
    """Test suite for Adam and the learning-rate schedule"""

    def test_schedule_decay(self):
        """Test η at step 4000 with rate 0.9 every 2000 steps"""
        schedule = LearningRateSchedule(base=1e-3, decay_rate=0.9, decay_steps=2000)
        assert schedule(4000) == pytest.approx(8.1e-4)
        assert schedule(1999) == pytest.approx(1e-3)

    def test_schedule_start_step(self):
        """Test the schedule counts from its start step"""
        schedule = LearningRateSchedule(base=1.0, decay_rate=0.5, decay_steps=10, start_step=100)
        assert schedule(105) == 1.0
        assert schedule(120) == 0.25

    def test_schedule_round_trip(self):
        schedule = LearningRateSchedule(2e-3, 0.8, 500, 7)
        assert LearningRateSchedule.from_dict(schedule.to_dict()) == schedule
        assert AdamSettings.from_dict(AdamSettings().to_dict()) == AdamSettings()

    def test_first_adam_step(self):
        """Test the bias-corrected first step moves by −η/(1 + ε)"""
        state = scalar_state(1.0)
        grad = ParamVector(state.params.layout, [1.0])
        new = adam_step(state, grad)
        assert new.params.flat[0] - 1.0 == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)
        assert (new.step, new.adam_count) == (1, 1)

    def test_state_is_not_mutated(self):
        """Test adam_step returns a new state"""
        state = scalar_state(1.0)
        adam_step(state, ParamVector(state.params.layout, [1.0]))
        assert state.params.flat[0] == 1.0 and state.step == 0

    def test_non_finite_gradient(self):
        """Test NaN gradients raise and name the last checkpoint"""
        state = replace(scalar_state(), last_checkpoint="runs/x/final.ckpt")
        with pytest.raises(NonFiniteGradient) as exc:
            adam_step(state, ParamVector(state.params.layout, [np.nan]))
        assert exc.value.checkpoint == "runs/x/final.ckpt"

    def test_gradient_layout_mismatch(self):
        """Test a gradient with another layout is refused"""
        state = scalar_state()
        other = ParamVector(ParamLayout.build([("theta", (2,))]), [1.0, 1.0])
        with pytest.raises(ShapeError):
            adam_step(state, other)

    def test_reset_moments(self):
        """Test moments and bias correction restart while the step counter keeps going"""
        state = adam_step(scalar_state(), ParamVector(ParamLayout.build([("theta", (1,))]), [2.0]))
        reset = state.reset_moments()
        assert reset.adam_count == 0 and reset.step == 1
        assert not np.any(reset.m.flat) and not np.any(reset.v.flat)
        np.testing.assert_array_equal(reset.params.flat, state.params.flat)


@pytest.mark.unit
class TestSampling:
    """Test suite for batch sampling"""

    def test_stratified_chunks(self, run_config):
        """Test every chunk gets the same number of points inside its interval"""
        problem = get_problem("advection")
        coords, labels = sample_collocation(np.random.default_rng(0), problem, 16, 4)
        assert coords.shape == (16, 2)
        assert np.bincount(labels).tolist() == [4, 4, 4, 4]
        np.testing.assert_array_equal(chunk_index(coords[:, 0], problem.t_span, 4), labels)
        assert np.all((coords[:, 1] >= 0) & (coords[:, 1] < 2 * np.pi))

    def test_rounds_up(self):
        """Test n_r not divisible by the chunk count is rounded up"""
        coords, labels = sample_collocation(np.random.default_rng(0), get_problem("advection"), 10, 4)
        assert coords.shape[0] == 12

    def test_boundary_batch(self, heat_config, run_config):
        """Test boundary samples exist only for loss-term boundaries"""
        config = heat_config()
        batch = sample_batch(np.random.default_rng(0), get_problem("heat_dirichlet"), config)
        assert set(np.unique(batch.bc_coords[:, 1])) == {0.0, 1.0}
        np.testing.assert_array_equal(batch.bc_targets, np.zeros(4))
        assert sample_batch(np.random.default_rng(0), get_problem("advection"), run_config()).bc_coords is None

    def test_per_chunk(self, run_config):
        batch = sample_batch(np.random.default_rng(0), get_problem("advection"), run_config())
        assert batch.per_chunk == 4
        assert batch.ic_x.shape == (8,)


@pytest.mark.unit
class TestLosses:
    """Test suite for loss evaluation"""

    def test_breakdown_terms(self, run_config, heat_config):
        """Test the terms present for periodic and Dirichlet problems"""
        for config, terms in ((run_config(), {"ic", "r"}), (heat_config(), {"ic", "bc", "r"})):
            problem, net, state = fresh_run(config)
            batch = sample_batch(np.random.default_rng(1), problem, config)
            _, breakdown = evaluate_losses(problem, net, net.params, batch, state.weights, causal=True)
            assert set(breakdown.values()) == terms
            assert breakdown.chunk_values.shape == (4,)

    def test_causal_weights_applied(self, run_config):
        """Test causal weights start at one and never increase"""
        problem, net, state = fresh_run(run_config())
        batch = sample_batch(np.random.default_rng(2), problem, run_config())
        _, breakdown = evaluate_losses(problem, net, net.params, batch, state.weights, causal=True)
        assert breakdown.w[0] == 1.0
        assert np.all(np.diff(breakdown.w) <= 0)
        _, plain = evaluate_losses(problem, net, net.params, batch, state.weights, causal=False)
        np.testing.assert_array_equal(plain.w, np.ones(4))

    def test_single_chunk_reduces_to_mean_residual(self, run_config):
        """Test M = 1 with causal weighting equals the plain mean squared residual"""
        config = run_config(weighting={"chunks": 1})
        problem, net, state = fresh_run(config)
        batch = sample_batch(np.random.default_rng(3), problem, config)
        _, breakdown = evaluate_losses(problem, net, net.params, batch, state.weights, causal=True)
        tape = Tape()
        r = residual_values(problem, net, tape.bind_params(net.params), batch.coords).value
        assert breakdown.values()["r"] == pytest.approx(float(np.mean(r**2)), rel=1e-12)

    @pytest.mark.weighting
    def test_ntk_statistics(self, heat_config):
        """Test normalized NTK traces for every term"""
        config = heat_config()
        problem, net, _ = fresh_run(config)
        batch = sample_batch(np.random.default_rng(0), problem, config)
        traces = ntk_statistics(problem, net, net.params, batch, size=4)
        assert set(traces) == {"ic", "bc", "r"}
        assert all(value > 0 for value in traces.values())


@pytest.mark.integration
class TestTrainWindow:
    """Test suite for the training loop"""

    def test_records(self, run_config):
        """Test one record per logged step with losses and weights"""
        config = run_config()
        problem, net, state = fresh_run(config)
        sink = MetricsWriter()
        state, records = train_window(problem, net, state, config, sink=sink)
        assert state.step == 4
        assert [r.step for r in records] == [0, 1, 2, 3]
        assert set(records[0].losses) == {"ic", "r", "total"}
        assert set(records[0].lambdas) == {"ic", "r"}
        assert records[0].learning_rate == pytest.approx(1e-3)
        assert len(sink.records) == 4

    def test_log_interval(self, run_config):
        """Test records at the interval plus the last step"""
        config = run_config(log_every=3, optimizer={"steps": 5})
        problem, net, state = fresh_run(config)
        _, records = train_window(problem, net, state, config)
        assert [r.step for r in records] == [0, 3, 4]

    def test_loss_weights_change(self, run_config):
        """Test grad-norm balancing moves λ away from one"""
        config = run_config()
        problem, net, state = fresh_run(config)
        state, _ = train_window(problem, net, state, config)
        assert state.weights.lambdas != {"ic": 1.0, "r": 1.0}

    def test_deterministic(self, run_config):
        """Test identical configs give identical parameters"""
        config = run_config(weighting={"mode": "ntk", "ntk_batch": 4})
        finals = []
        for _ in range(2):
            problem, net, state = fresh_run(config)
            finals.append(train_window(problem, net, state, config)[0].params.flat)
        np.testing.assert_array_equal(finals[0], finals[1])

    def test_resume_is_bit_exact(self, run_config, tmp_path):
        """Test 4 steps equal 2 steps, a checkpoint round trip, and 2 more"""
        config = run_config()
        problem, net, state = fresh_run(config)
        straight, _ = train_window(problem, net, state, config, steps=4)

        problem, net, state = fresh_run(config)
        path = tmp_path / "half.ckpt"
        half, _ = train_window(problem, net, state, config, steps=2, checkpoint_path=path)
        restored = load_checkpoint(path, expected_layout=net.layout)
        resumed, records = train_window(problem, restored.network, restored.state, config, steps=2)

        assert resumed.step == 4
        assert [r.step for r in records] == [2, 3]
        np.testing.assert_array_equal(resumed.params.flat, straight.params.flat)
        np.testing.assert_array_equal(resumed.m.flat, straight.m.flat)
        assert resumed.weights.lambdas == straight.weights.lambdas

    def test_failure_saves_checkpoint(self, run_config, tmp_path):
        """Test a NaN gradient leaves the last good state on disk"""
        config = run_config()
        problem, net, state = fresh_run(config)
        path = tmp_path / "crash.ckpt"

        def nan_grad(tape, loss):
            return ParamVector(tape.layout, np.full(tape.layout.size, np.nan))

        with patch("src.engine.train.loss_grad", side_effect=nan_grad):
            with pytest.raises(NonFiniteGradient) as exc:
                train_window(problem, net, state, config, checkpoint_path=path)
        assert exc.value.checkpoint == str(path)
        assert load_checkpoint(path).state.step == 0

    def test_diagnostics_in_records(self, run_config):
        """Test periodic diagnostics are attached to the logged record"""
        config = run_config(diagnostics={"every": 2, "which": ["grads", "temporal"], "batch": 4})
        problem, net, state = fresh_run(config)
        _, records = train_window(problem, net, state, config)
        assert records[0].diagnostics is not None
        assert set(records[0].diagnostics) == {"grads", "temporal"}
        assert records[1].diagnostics is None


@pytest.mark.integration
class TestCurricula:
    """Test suite for time marching and parameter continuation"""

    def test_window_plan(self, run_config):
        """Test windows tile the domain exactly"""
        plan = WindowPlan(windows=3, steps_per_window=10)
        bounds = plan.boundaries((0.0, 1.0))
        assert len(bounds) == 3 and bounds[0][0] == 0.0 and bounds[-1][1] == 1.0
        config = run_config(curriculum={"kind": "time_march", "time_march": {"windows": 2}})
        assert WindowPlan.from_config(config).steps_per_window == 2
        with pytest.raises(ValueError):
            WindowPlan(windows=0, steps_per_window=1)

    def test_stitched_owner(self, make_network):
        """Test boundary times belong to the earlier window"""
        stitched = StitchedSolution([(0.0, 0.5), (0.5, 1.0)], [make_network(seed=0), make_network(seed=1)])
        assert stitched.owner(np.array([0.0, 0.5, 0.51, 1.0])).tolist() == [0, 0, 1, 1]

    def test_time_march(self, run_config, tmp_path):
        """Test two windows train in sequence and checkpoint separately"""
        config = run_config(
            curriculum={"kind": "time_march", "time_march": {"windows": 2, "steps_per_window": 2, "transfer_points": 16}}
        )
        problem = get_problem("advection", {"c": 1.0})
        result = time_march(problem, WindowPlan.from_config(config), config, out_dir=tmp_path)
        assert len(result.networks) == 2
        assert result.states[-1].step == 4
        assert {r.window for r in result.records} == {0, 1}
        assert len(result.ic_losses) == 2
        assert (tmp_path / "window_0.ckpt").exists() and (tmp_path / "window_1.ckpt").exists()
        assert result.solution(np.array([[0.2, 1.0], [0.8, 1.0]])).shape == (2,)

    def test_march_aborted_keeps_completed_windows(self, run_config):
        """Test a failing window reports the windows finished before it"""
        config = run_config(curriculum={"kind": "time_march", "time_march": {"windows": 2, "steps_per_window": 1, "transfer_points": 16}})
        real = train.train_window
        calls = []

        def flaky(*args, **kwargs):
            calls.append(kwargs.get("window"))
            if len(calls) == 2:
                raise NumericalOverflow("Non-finite activation in layer 1", layer=1)
            return real(*args, **kwargs)

        with patch("src.engine.train.train_window", side_effect=flaky):
            with pytest.raises(MarchAborted) as exc:
                time_march(get_problem("advection", {"c": 1.0}), WindowPlan.from_config(config), config)
        assert exc.value.window == 1
        assert len(exc.value.result.networks) == 1

    def test_continuation(self, run_config, tmp_path):
        """Test stages warm-start, reset moments and keep the step counter"""
        config = run_config(
            curriculum={"kind": "continuation", "continuation": {"constant": "c", "values": [1.0, 2.0], "steps": [2, 3]}}
        )
        result = continue_parameter(
            get_problem("advection", {"c": 1.0}), ContinuationPlan.from_config(config), config, out_dir=tmp_path
        )
        assert result.moment_resets == 1
        assert result.state.step == 5
        assert result.state.adam_count == 3
        assert result.state.phase_start == 2
        assert {r.stage for r in result.records} == {0, 1}
        assert (tmp_path / "stage_1.ckpt").exists()

    def test_continuation_plan_validation(self):
        with pytest.raises(ValueError):
            ContinuationPlan("c", ())
        with pytest.raises(ValueError):
            ContinuationPlan("c", ((1.0, 0),))

    def test_run_curriculum_plain(self, run_config, tmp_path):
        """Test the plain curriculum writes final.ckpt"""
        config = run_config()
        result = run_curriculum(get_problem("advection", {"c": 1.0}), config, out_dir=tmp_path)
        assert result.state.step == 4
        assert (tmp_path / "final.ckpt").exists()
        assert result.solution(np.array([[0.1, 0.2]])).shape == (1,)

    def test_single_window_march_matches_plain_training(self, run_config):
        """Test one window over the whole domain reproduces train_window"""
        config = run_config()
        problem, net, state = fresh_run(config)
        straight, _ = train_window(problem, net, state, config)
        march = time_march(problem, WindowPlan(windows=1, steps_per_window=4), config)
        np.testing.assert_array_equal(march.states[0].params.flat, straight.params.flat)
        assert march.states[0].step == straight.step

    def test_single_stage_continuation_matches_plain_training(self, run_config):
        """Test continuation at the problem's own value reproduces train_window"""
        config = run_config()
        problem, net, state = fresh_run(config)
        straight, _ = train_window(problem, net, state, config)
        result = continue_parameter(problem, ContinuationPlan("c", ((1.0, 4),)), config)
        assert result.moment_resets == 0
        np.testing.assert_array_equal(result.state.params.flat, straight.params.flat)

    def test_stitched_jump_is_window_ic_loss(self, run_config):
        """Test the jump of the stitched solution at a window edge is what the next window's IC loss measures"""
        config = run_config()
        problem = get_problem("advection", {"c": 1.0})
        plan = WindowPlan(windows=2, steps_per_window=2, transfer_points=16)
        result = time_march(problem, plan, config)
        edge = plan.boundaries(problem.t_span)[0][1]
        xs = uniform_grid(problem.x_span, 16, periodic=True)
        coords = np.column_stack([np.full_like(xs, edge), xs])
        left = result.solution(coords)
        np.testing.assert_array_equal(left, predict(result.networks[0], coords)[:, 0])
        jump = predict(result.networks[1], coords)[:, 0] - left
        assert float(np.mean(jump**2)) == pytest.approx(result.ic_losses[1], rel=1e-8, abs=1e-14)

    def test_vector_problem_needs_enough_outputs(self, run_config):
        """Test a scalar network cannot train a two-output problem"""
        config = run_config()
        problem, net, state = fresh_run(config)
        with pytest.raises(InvalidProblem, match="2 outputs"):
            train_window(replace(problem, outputs=2), net, state, config)
        with pytest.raises(InvalidProblem):
            time_march(replace(problem, outputs=2), WindowPlan(windows=2, steps_per_window=1), config)
