"""Tests for NTK spectra, gradient histograms, temporal profiles and spectral bias"""

import numpy as np
import pytest

from src.engine.autodiff import Tape, per_sample_gradients
from src.engine.diag import (
    HISTOGRAM_EDGES,
    SpectralBiasResult,
    grad_histogram,
    ntk_spectrum,
    spectral_bias_run,
    temporal_residual_profile,
    term_gradients,
    term_spectra,
)
from src.engine.errors import BatchTooLarge, EmptyBatch
from src.engine.nets import build_network
from src.engine.problems import advection, allen_cahn, get_problem, term_outputs
from src.engine.train import Batch, evaluate_losses
from src.engine.weighting import LossWeights, ntk_trace

from .conftest import traveling_sine

pytestmark = pytest.mark.diag


@pytest.fixture
def net(make_network):
    return make_network(seed=2, width=8, periodic={"periods": {"x": 2.0}})


@pytest.mark.unit
class TestNtkSpectrum:
    """Test suite for NTK eigen-spectra"""

    def test_single_sample(self, net):
        """Test one sample gives one eigenvalue equal to its squared gradient norm"""
        point = np.array([[0.3, 0.4]])
        u = term_outputs(allen_cahn(), "ic")
        eigenvalues = ntk_spectrum(net, net.params, u, point)
        tape = Tape()
        jac = per_sample_gradients(tape, u(net, tape.bind_params(net.params), point))
        assert eigenvalues.shape == (1,)
        assert eigenvalues[0] == pytest.approx(float(jac[0] @ jac[0]), rel=1e-12)

    def test_duplicated_sample(self, net):
        """Test a repeated sample doubles one eigenvalue and adds a zero"""
        u = term_outputs(allen_cahn(), "ic")
        single = ntk_spectrum(net, net.params, u, np.array([[0.3, 0.4]]))
        double = ntk_spectrum(net, net.params, u, np.array([[0.3, 0.4], [0.3, 0.4]]))
        assert double[0] == pytest.approx(2 * single[0], rel=1e-10)
        assert abs(double[1]) < 1e-10 * double[0]

    def test_sorted_and_sums_to_trace(self, net):
        """Test eigenvalues are descending and sum to the NTK trace"""
        problem = allen_cahn()
        r = term_outputs(problem, "r")
        points = np.column_stack([np.linspace(0, 1, 6), np.linspace(-1, 1, 6)])
        eigenvalues = ntk_spectrum(net, net.params, r, points)
        assert np.all(np.diff(eigenvalues) <= 1e-12 * eigenvalues[0])
        assert eigenvalues.sum() == pytest.approx(ntk_trace(net, net.params, r, points), rel=1e-10)

    def test_batch_limits(self, net):
        """Test empty and oversized batches are refused"""
        u = term_outputs(allen_cahn(), "ic")
        with pytest.raises(EmptyBatch):
            ntk_spectrum(net, net.params, u, np.zeros((0, 2)))
        with pytest.raises(BatchTooLarge, match="200"):
            ntk_spectrum(net, net.params, u, np.zeros((201, 2)))

    def test_term_spectra(self, net):
        """Test spectra for the initial-condition and residual terms"""
        spectra = term_spectra(allen_cahn(), net, net.params, batch=5, seed=1)
        assert set(spectra) == {"ic", "r"}
        for entry in spectra.values():
            assert len(entry["eigenvalues"]) == 5
            assert entry["trace"] == pytest.approx(sum(entry["eigenvalues"]))


@pytest.mark.unit
class TestGradientHistograms:
    """Test suite for log-binned gradient histograms"""

    def test_bins(self):
        """Test 28 log-spaced bins spanning 1e-12 to 1e2"""
        assert len(HISTOGRAM_EDGES) == 29
        assert HISTOGRAM_EDGES[0] == pytest.approx(1e-12)
        assert HISTOGRAM_EDGES[-1] == pytest.approx(1e2)

    def test_counts_add_up(self):
        """Test under- and overflow plus bin counts cover every entry"""
        hist = grad_histogram(np.array([0.0, 1e-13, -1e-6, 1.0, 1e3]))
        assert hist["underflow"] == 2
        assert hist["overflow"] == 1
        assert sum(hist["counts"]) == 2
        assert hist["total"] == 5
        assert hist["max_abs"] == 1e3
        assert hist["norm"] == pytest.approx(np.linalg.norm([1e-13, 1e-6, 1.0, 1e3]))

    def test_empty(self):
        hist = grad_histogram(np.array([]))
        assert hist["total"] == 0 and hist["max_abs"] == 0.0

    def test_accepts_param_vectors(self, net):
        assert grad_histogram(net.params)["total"] == net.layout.size

    def test_untrained_residual_gradient_dominates(self, run_config):
        """Test the residual gradient outweighs the initial-condition gradient at initialization"""
        config = run_config(
            problem={"name": "allen_cahn", "overrides": {}},
            network={"arch": "plain", "depth": 2, "width": 16, "coords": ["t", "x"], "periodic": {"periods": {"x": 2.0}}},
            weighting={"causal": False},
            batch={"n_ic": 64, "n_bc": 4, "n_r": 64},
        )
        problem = get_problem("allen_cahn")
        net = build_network(config.network, seed=0)
        hists = term_gradients(problem, net, net.params, config, seed=0)
        assert set(hists) == {"ic", "r"}
        assert hists["r"]["norm"] > hists["ic"]["norm"]


@pytest.mark.unit
class TestTemporalProfile:
    """Test suite for per-chunk residual profiles"""

    def test_exact_solution(self):
        """Test an exact advection solution has a vanishing profile"""
        profile = temporal_residual_profile(traveling_sine(1.0), traveling_sine(1.0).params, advection(c=1.0), chunks=4, n_x=32)
        assert profile.shape == (4,)
        assert np.all(profile < 1e-20)

    def test_untrained_network(self, net):
        """Test an untrained network has a positive residual in every chunk"""
        profile = temporal_residual_profile(net, net.params, allen_cahn(), chunks=3, n_x=16, points_per_chunk=2)
        assert np.all(profile > 0)

    def test_needs_two_chunks(self, net):
        with pytest.raises(ValueError, match="two chunks"):
            temporal_residual_profile(net, net.params, allen_cahn(), chunks=1)

    def test_mean_matches_unchunked_residual_loss(self, net):
        """Test the profile's mean is the residual loss on the same stacked points"""
        problem, chunks, n_x, per_chunk = allen_cahn(), 4, 12, 3
        profile = temporal_residual_profile(net, net.params, problem, chunks=chunks, n_x=n_x, points_per_chunk=per_chunk)

        width = problem.duration / chunks
        offsets = (np.arange(per_chunk) + 0.5) / per_chunk * width
        times = np.concatenate([problem.t_span[0] + i * width + offsets for i in range(chunks)])
        xs = np.linspace(*problem.x_span, n_x, endpoint=False)
        tt, xx = np.meshgrid(times, xs, indexing="ij")
        coords = np.column_stack([tt.reshape(-1), xx.reshape(-1)])
        batch = Batch(ic_x=xs, coords=coords, chunks=np.repeat(np.arange(chunks), per_chunk * n_x))
        weights = LossWeights.initial(problem.loss_terms, chunks)
        _, breakdown = evaluate_losses(problem, net, net.params, batch, weights, causal=False)
        assert profile.mean() == pytest.approx(breakdown.values()["r"], rel=1e-12)


@pytest.mark.unit
class TestSpectralBias:
    """Test suite for the spectral-bias regression experiment"""

    def test_gap(self):
        """Test missing half-lives count as the full budget"""
        result = SpectralBiasResult(seed=0, half_life={1: 10, 8: None})
        assert result.gap(1, 8, budget=100) == 90.0
        assert SpectralBiasResult(seed=0, half_life={1: 10, 8: 30}).gap(1, 8, budget=100) == 20.0

    @pytest.mark.slow
    def test_tiny_run(self):
        """Test a short run records every tracked component"""
        result = spectral_bias_run(seed=0, steps=5, learning_rate=1e-2, width=8, depth=2, n_points=32, record_every=1)
        assert set(result.half_life) == {1, 8}
        assert all(len(history) >= 1 for history in result.history.values())
        assert all(h is None or 0 < h <= 5 for h in result.half_life.values())

    @pytest.mark.slow
    def test_fourier_features_run(self):
        """Test the experiment runs with a Fourier embedding"""
        result = spectral_bias_run(seed=1, fourier_scale=2.0, steps=3, width=8, depth=2, n_points=32)
        assert result.seed == 1
