"""Unit tests for causal, grad-norm and NTK loss weighting"""

import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from src.engine.autodiff import ParamLayout, ParamVector, Tape
from src.engine.errors import DegenerateGradient, DegenerateKernel, EmptyBatch, InvalidLoss
from src.engine.problems import allen_cahn, ic_component, ic_loss, residual_values, term_outputs
from src.engine.weighting import (
    LossBreakdown,
    LossWeights,
    causal_weights,
    chunk_index,
    ema_update,
    grad_norm_lambdas,
    grad_norms,
    ntk_lambdas,
    ntk_trace,
    refresh_lambdas,
    should_refresh,
    total_loss,
)

from .conftest import constant_network

pytestmark = [pytest.mark.unit, pytest.mark.weighting]


def theta_params(values):
    layout = ParamLayout.build([("theta", (len(values),))])
    return ParamVector(layout, values)


def simple_breakdown(ic=2.0, chunks=(1.0, 3.0), w=(1.0, 0.5)):
    tape = Tape()
    ic_node = tape.leaf(ic)
    chunk_node = tape.leaf(list(chunks))
    breakdown = LossBreakdown(terms={"ic": ic_node * 1.0}, chunk_losses=chunk_node * 1.0, w=np.array(w))
    return tape, chunk_node, breakdown


class TestCausalWeights:
    """Test suite for temporal causal weights"""

    def test_reference_values(self):
        """Test w = [1, e^-0.5, e^-0.8] for losses [0.5, 0.3, 0.2]"""
        w = causal_weights([0.5, 0.3, 0.2], epsilon=1.0)
        np.testing.assert_allclose(w, [1.0, math.exp(-0.5), math.exp(-0.8)], rtol=1e-15)

    def test_first_weight_is_one(self):
        """Test the first chunk always has full weight"""
        assert causal_weights([7.0, 1.0], epsilon=3.0)[0] == 1.0

    def test_monotone_nonincreasing(self):
        """Test weights never increase along time"""
        losses = np.random.default_rng(0).random(16)
        w = causal_weights(losses, epsilon=2.0)
        assert np.all(np.diff(w) <= 0)
        assert np.all((w > 0) & (w <= 1))

    def test_zero_losses_give_uniform_weights(self):
        """Test a solved problem weights every chunk equally"""
        np.testing.assert_array_equal(causal_weights(np.zeros(5), epsilon=1.0), np.ones(5))

    @pytest.mark.parametrize("epsilon", [0.0, -1.0])
    def test_invalid_tolerance(self, epsilon):
        """Test nonpositive ε raises ValueError"""
        with pytest.raises(ValueError, match="positive"):
            causal_weights([0.1], epsilon=epsilon)

    @pytest.mark.parametrize("losses", [[0.1, -0.2], [np.nan, 0.1], [np.inf]])
    def test_invalid_losses(self, losses):
        """Test negative or non-finite chunk losses raise InvalidLoss"""
        with pytest.raises(InvalidLoss):
            causal_weights(losses, epsilon=1.0)

    def test_large_tolerance_silences_later_chunks(self):
        """Test a large ε leaves only the first chunk weighted"""
        w = causal_weights([0.5, 0.5, 0.5, 0.5], epsilon=1e3)
        assert w[0] == 1.0
        assert np.all(w[1:] < 1e-200)

    def test_chunk_index(self):
        """Test chunk assignment including the right endpoint"""
        idx = chunk_index(np.array([0.0, 0.24, 0.25, 0.99, 1.0]), (0.0, 1.0), 4)
        assert idx.tolist() == [0, 0, 1, 3, 3]


class TestGlobalWeights:
    """Test suite for grad-norm and NTK balancing"""

    def test_balancing_identity(self):
        """Test λ̂_i ‖∇L_i‖ equals the sum of norms for every term"""
        norms = {"ic": 0.3, "bc": 2.0, "r": 11.5}
        hats = grad_norm_lambdas(norms)
        for name, value in norms.items():
            assert hats[name] * value == pytest.approx(sum(norms.values()), rel=1e-12)

    def test_ntk_lambdas(self):
        """Test λ̂ from traces: (1 + 3) / 1 and (1 + 3) / 3"""
        hats = ntk_lambdas({"ic": 1.0, "r": 3.0})
        assert hats == pytest.approx({"ic": 4.0, "r": 4.0 / 3.0})

    def test_degenerate_gradient(self):
        """Test a vanishing norm raises DegenerateGradient naming the term"""
        with pytest.raises(DegenerateGradient) as exc:
            grad_norm_lambdas({"ic": 0.0, "r": 1.0})
        assert exc.value.terms == ["ic"]

    def test_degenerate_kernel(self):
        """Test a vanishing trace raises DegenerateKernel"""
        with pytest.raises(DegenerateKernel) as exc:
            ntk_lambdas({"ic": 1.0, "r": 1e-13})
        assert exc.value.terms == ["r"]

    @pytest.mark.parametrize("alpha,expected", [(1.0, 2.0), (0.0, 10.0), (0.9, 2.8)])
    def test_ema_update(self, alpha, expected):
        """Test λ ← αλ + (1 − α)λ̂ including both endpoints"""
        assert ema_update({"ic": 2.0}, {"ic": 10.0}, alpha)["ic"] == pytest.approx(expected)

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_ema_invalid_alpha(self, alpha):
        """Test α outside [0, 1] raises ValueError"""
        with pytest.raises(ValueError):
            ema_update({"ic": 1.0}, {"ic": 1.0}, alpha)

    def test_refresh_skips_degenerate_terms(self, caplog):
        """Test a degenerate term keeps its λ and is logged"""
        weights = LossWeights.initial(["ic", "r"], chunks=2, alpha=0.5)
        weights.lambdas["ic"] = 3.0
        with caplog.at_level(logging.WARNING):
            refreshed = refresh_lambdas(weights, {"ic": 0.0, "r": 2.0})
        assert refreshed.lambdas["ic"] == 3.0
        assert refreshed.lambdas["r"] == pytest.approx(0.5 * 1.0 + 0.5 * 1.0)
        assert "degenerate terms: ic" in caplog.text

    def test_refresh_returns_new_weights(self):
        """Test refresh does not mutate its input"""
        weights = LossWeights.initial(["ic", "r"], chunks=2, alpha=0.0)
        refreshed = refresh_lambdas(weights, {"ic": 1.0, "r": 3.0})
        assert weights.lambdas == {"ic": 1.0, "r": 1.0}
        assert refreshed.lambdas == pytest.approx({"ic": 4.0, "r": 4.0 / 3.0})

    @pytest.mark.parametrize("step,every,expected", [(0, 5, True), (3, 5, False), (10, 5, True), (7, 1, True)])
    def test_should_refresh(self, step, every, expected):
        assert should_refresh(step, every) is expected


class TestLossAssembly:
    """Test suite for loss breakdowns and the weighted total"""

    def test_residual_is_weighted_chunk_mean(self):
        """Test L_r = mean(w_i L_i)"""
        _, _, breakdown = simple_breakdown()
        assert breakdown.values() == pytest.approx({"ic": 2.0, "r": (1.0 + 1.5) / 2})

    def test_total_loss(self):
        """Test Σ λ_i L_i"""
        _, _, breakdown = simple_breakdown()
        weights = LossWeights.initial(["ic", "r"], chunks=2)
        weights.lambdas.update({"ic": 2.0, "r": 4.0})
        assert float(total_loss(breakdown, weights).value) == pytest.approx(2.0 * 2.0 + 4.0 * 1.25)

    def test_zero_residual_weight(self):
        """Test λ_r = 0 drops the residual entirely"""
        _, _, breakdown = simple_breakdown()
        weights = LossWeights.initial(["ic", "r"], chunks=2)
        weights.lambdas["r"] = 0.0
        assert float(total_loss(breakdown, weights).value) == pytest.approx(2.0)

    def test_weights_are_frozen(self):
        """Test gradients see λ and w as constants"""
        tape, chunk_node, breakdown = simple_breakdown(w=(1.0, 0.25))
        weights = LossWeights.initial(["ic", "r"], chunks=2)
        weights.lambdas["r"] = 3.0
        adjoints = tape.backward(total_loss(breakdown, weights))
        np.testing.assert_allclose(adjoints[chunk_node.index], [3.0 * 1.0 / 2, 3.0 * 0.25 / 2], atol=1e-14)

    def test_grad_norms_per_term(self):
        """Test unweighted gradient norms of each term"""
        tape = Tape()
        nodes = tape.bind_params(theta_params([3.0, 4.0]))
        theta = nodes["theta"]
        breakdown = LossBreakdown(terms={"ic": (theta * theta).sum()}, chunk_losses=theta * 1.0, w=np.ones(2))
        norms = grad_norms(tape, breakdown)
        assert norms["ic"] == pytest.approx(10.0)
        assert norms["r"] == pytest.approx(math.sqrt(0.5))

    def test_weights_round_trip(self):
        """Test LossWeights survives to_dict / from_dict"""
        weights = LossWeights(lambdas={"ic": 2.5, "r": 0.7}, w=np.array([1.0, 0.3]), epsilon=0.5, alpha=0.8, update_every=7)
        restored = LossWeights.from_dict(weights.to_dict(), weights.w)
        assert restored.lambdas == weights.lambdas
        assert (restored.epsilon, restored.alpha, restored.update_every) == (0.5, 0.8, 7)
        np.testing.assert_array_equal(restored.w, weights.w)
        assert weights.to_dict()["chunks"] == 2

    def test_initial_weights(self):
        """Test every λ starts at one and every chunk is fully weighted"""
        weights = LossWeights.initial(["ic", "bc", "r"], chunks=4)
        assert weights.lambdas == {"ic": 1.0, "bc": 1.0, "r": 1.0}
        assert weights.min_w == weights.mean_w == 1.0


class TestNtkTrace:
    """Test suite for NTK trace estimates"""

    def test_linear_model(self):
        """Test o = θx at x = (0, 2) has trace Σx² = 4"""
        trace = ntk_trace(None, theta_params([0.7]), lambda net, nodes, xs: nodes["theta"] * xs, np.array([0.0, 2.0]))
        assert trace == pytest.approx(4.0)

    def test_empty_batch(self):
        """Test an empty batch raises EmptyBatch"""
        with pytest.raises(EmptyBatch):
            ntk_trace(None, theta_params([1.0]), lambda net, nodes, xs: nodes["theta"] * xs, np.array([]))

    def test_matches_analytic_jacobian(self, make_network):
        """Test the trace of a one-hidden-layer tanh network against its closed-form Jacobian"""
        net = make_network(depth=1, width=4, coords=["x"])
        assert net.layout.size == 13
        net = net.with_params(net.params.with_flat(np.random.default_rng(1).standard_normal(13)))
        xs = np.array([-0.8, 0.1, 0.6])

        def term_fn(network, nodes, batch):
            return network.jets(nodes, batch[:, None], {}).value(0)

        W0 = net.params.view("dense_0/W")[0]
        b0 = net.params.view("dense_0/b")
        W1 = net.params.view("dense_1/W")[:, 0]
        expected = 0.0
        for x in xs:
            h = np.tanh(W0 * x + b0)
            sech2 = 1.0 - h * h
            row = np.concatenate([W1 * sech2 * x, W1 * sech2, h, [1.0]])
            expected += float(row @ row)
        assert ntk_trace(net, net.params, term_fn, xs) == pytest.approx(expected, rel=1e-10)

    def test_duplicated_samples_double_trace(self, make_network):
        """Test repeating every sample doubles the trace"""
        net = make_network(seed=3)
        points = np.array([[0.0, -0.5], [0.2, 0.1], [0.7, 0.9]])
        term_fn = term_outputs(allen_cahn(), "ic")
        single = ntk_trace(net, net.params, term_fn, points)
        doubled = ntk_trace(net, net.params, term_fn, np.vstack([points, points]))
        assert doubled == pytest.approx(2.0 * single, rel=1e-12)

    def test_residual_trace_differs_from_ic_trace(self, make_network):
        """Test the residual kernel is not the value kernel on the same points"""
        net = make_network(seed=3)
        points = np.array([[0.1, -0.5], [0.4, 0.1], [0.8, 0.6]])
        problem = allen_cahn()
        ic_trace = ntk_trace(net, net.params, term_outputs(problem, "ic"), points)
        r_trace = ntk_trace(net, net.params, term_outputs(problem, "r"), points)
        assert r_trace > 0 and ic_trace > 0
        assert r_trace != pytest.approx(ic_trace, rel=1e-3)


class TestVectorOutputs:
    """Test suite for per-component initial-condition weights"""

    def test_lambdas_keyed_per_component(self):
        """Test grad-norm balancing gives ic_0 and ic_1 their own λ"""
        problem = replace(
            allen_cahn(), outputs=2, ic=lambda x: np.column_stack([np.zeros_like(x), np.ones_like(x)])
        )
        net = constant_network((0.5, 3.0))
        tape = Tape()
        nodes = tape.bind_params(net.params)
        xs = np.linspace(-1.0, 1.0, 5)
        terms = {term: ic_loss(net, nodes, xs, problem.ic, 0.0, ic_component(term)) for term in problem.ic_terms}
        coords = np.array([[0.1, -0.5], [0.2, 0.5], [0.6, -0.1], [0.9, 0.3]])
        residual = residual_values(problem, net, nodes, coords)
        breakdown = LossBreakdown(terms=terms, chunk_losses=(residual * residual).reshape(2, 2).mean(axis=1), w=np.ones(2))

        norms = grad_norms(tape, breakdown)
        # only the output biases carry gradient: 2(u_k - g_k) and 2 r dr/du with r = -5(u - u³)
        assert norms == pytest.approx({"ic_0": 1.0, "ic_1": 4.0, "r": 4.6875})

        weights = LossWeights.initial(problem.loss_terms, chunks=2, alpha=0.0)
        assert set(weights.lambdas) == {"ic_0", "ic_1", "r"}
        refreshed = refresh_lambdas(weights, norms)
        total = sum(norms.values())
        assert refreshed.lambdas == pytest.approx({name: total / value for name, value in norms.items()})
