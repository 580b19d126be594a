import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtx import numcore as nc
from gtx.gradcheck import param_gradcheck
from gtx.graph import build_laplacian, from_undirected
from gtx.numcore import ContractError, Tensor
from gtx.pe import FilterBank, PEConfig, gnn_forward, graph_conv, random_ids, rpearl, shift_operator
from gtx.selftest import permute_graph, random_connected_graph


def bank_of(*taps):
    return FilterBank([nc.parameter(np.atleast_2d(t)) for t in taps])


def rand_graph(n, seed):
    return random_connected_graph(n, 0.3, np.random.default_rng(seed))


class TestFilterBank:
    def test_needs_a_tap(self):
        with pytest.raises(ContractError):
            FilterBank([])

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            bank_of(np.ones((2, 2)), np.ones((2, 3)))

    def test_frequency_response(self):
        b = bank_of([[1.0]], [[2.0]], [[-0.5]])
        lam = np.array([0.0, 1.0])
        expect = 1.0 + 2.0 * np.exp(-lam) - 0.5 * np.exp(-2 * lam)
        np.testing.assert_allclose(b.frequency_response(lam)[:, 0, 0], expect, rtol=1e-15)


class TestGraphConv:
    def test_order_one_ignores_graph(self):
        rng = np.random.default_rng(0)
        h, z = rng.standard_normal((3, 2)), rng.standard_normal((2, 5))
        g = rand_graph(5, 1)
        np.testing.assert_allclose(graph_conv(bank_of(h), g, Tensor(z)).data, h @ z, rtol=1e-15)

    def test_identity_tap_gives_laplacian(self):
        g = from_undirected([(0, 1), (1, 2)], 3)
        out = graph_conv(bank_of(np.zeros((3, 3)), np.eye(3)), g, Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, g.laplacian.toarray())

    def test_matches_dense_matrix_powers(self):
        rng = np.random.default_rng(2)
        g = rand_graph(8, 3)
        taps = [rng.standard_normal((4, 3)) for _ in range(4)]
        z = rng.standard_normal((3, 8))
        L = g.laplacian.toarray()
        expect = sum(h @ z @ np.linalg.matrix_power(L, k) for k, h in enumerate(taps))
        np.testing.assert_allclose(graph_conv(bank_of(*taps), g, Tensor(z)).data, expect, rtol=1e-12, atol=1e-12)

    def test_dimension_errors(self):
        g = rand_graph(4, 0)
        with pytest.raises(ContractError):
            graph_conv(bank_of(np.ones((2, 3))), g, Tensor(np.ones((2, 4))))
        with pytest.raises(ContractError):
            graph_conv(bank_of(np.ones((2, 3))), g, Tensor(np.ones((3, 5))))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_signal(self, seed, a, b):
        rng = np.random.default_rng(seed)
        g = rand_graph(7, seed)
        bank = FilterBank.random(2, 3, 3, rng)
        z1, z2 = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
        lhs = graph_conv(bank, g, Tensor(a * z1 + b * z2)).data
        rhs = a * graph_conv(bank, g, Tensor(z1)).data + b * graph_conv(bank, g, Tensor(z2)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestGNNForward:
    def test_negative_preactivation_zero(self):
        g = rand_graph(5, 0)
        out = gnn_forward([(bank_of(-np.ones((2, 1))), "relu")], g, Tensor(np.ones((1, 5))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_relu_on_nonnegative_identity(self):
        g = rand_graph(5, 0)
        z = np.abs(np.random.default_rng(1).standard_normal((2, 5)))
        bank = bank_of(np.eye(2))
        np.testing.assert_array_equal(gnn_forward([(bank, "relu")], g, Tensor(z)).data,
                                      graph_conv(bank, g, Tensor(z)).data)

    def test_permutation_exact(self):
        rng = np.random.default_rng(4)
        g = rand_graph(9, 5)
        layers = [(FilterBank.random(4, 2, 3, rng), "relu"), (FilterBank.random(3, 4, 3, rng), "tanh")]
        z = rng.standard_normal((2, 9))
        perm = rng.permutation(9)
        ref = gnn_forward(layers, g, Tensor(z)).data
        out = gnn_forward(layers, permute_graph(g, perm), Tensor(z[:, perm])).data
        np.testing.assert_array_equal(out, ref[:, perm])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_expansive_with_normalised_banks(self, seed):
        rng = np.random.default_rng(seed)
        g = rand_graph(8, seed)
        shift = shift_operator(g, "laplacian_maxdeg") / 2.0  # spectrum in [0, 1]
        layers = []
        for din, dout in [(2, 3), (3, 2)]:
            taps = [rng.standard_normal((dout, din)) for _ in range(3)]
            total = sum(np.linalg.norm(t, 2) for t in taps)
            layers.append((bank_of(*[t / total for t in taps]), "tanh"))
        a, b = rng.standard_normal((2, 8)), rng.standard_normal((2, 8))
        fa, fb = gnn_forward(layers, shift, Tensor(a)).data, gnn_forward(layers, shift, Tensor(b)).data
        assert np.linalg.norm(fa - fb) <= np.linalg.norm(a - b) + 1e-12


class TestRPEARL:
    def test_zero_banks_zero_encoding(self):
        cfg = PEConfig([(bank_of(np.zeros((3, 1)), np.zeros((3, 1))), "relu")], samples=4)
        np.testing.assert_array_equal(rpearl(cfg, rand_graph(6, 0)).data, 0.0)

    def test_single_sample_single_tap(self):
        h0 = np.array([[0.7], [-1.3]])
        cfg = PEConfig([(bank_of(h0), "relu")], samples=1, seed=11)
        g = rand_graph(6, 2)
        z = random_ids(cfg, g.n)
        np.testing.assert_array_equal(rpearl(cfg, g).data, np.maximum(h0 @ z, 0).T)

    def test_output_layout(self):
        cfg = PEConfig.random(4, 5, 2, 3, np.random.default_rng(0), samples=3)
        assert rpearl(cfg, rand_graph(7, 0)).shape == (7, 5)

    def test_ids_keyed_by_seed_and_size(self):
        cfg = PEConfig.random(2, 2, 1, 2, np.random.default_rng(0), samples=2, seed=3)
        np.testing.assert_array_equal(random_ids(cfg, 5), random_ids(cfg, 5))
        assert not np.array_equal(random_ids(cfg, 5), random_ids(cfg, 6)[:, :5])

    def test_bad_id_shape(self):
        cfg = PEConfig.random(2, 2, 1, 2, np.random.default_rng(0), samples=2)
        with pytest.raises(ContractError):
            rpearl(cfg, rand_graph(5, 0), np.zeros((2, 4)))

    def test_layers_must_chain(self):
        with pytest.raises(ContractError):
            PEConfig([(bank_of(np.ones((3, 1))), "relu"), (bank_of(np.ones((2, 2))), "relu")])

    def test_matches_per_branch_loop(self):
        rng = np.random.default_rng(6)
        cfg = PEConfig.random(3, 2, 2, 3, rng, samples=5, kind="tanh")
        g = rand_graph(7, 1)
        z = random_ids(cfg, g.n)
        loop = np.mean([gnn_forward(cfg.layers, g, Tensor(z[m:m + 1])).data for m in range(5)], axis=0)
        np.testing.assert_allclose(rpearl(cfg, g).data, loop.T, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_conditional_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        cfg = PEConfig.random(4, 3, 2, 3, rng, samples=6)
        g = rand_graph(10, seed)
        z = random_ids(cfg, g.n)
        perm = rng.permutation(g.n)
        ref = rpearl(cfg, g, z).data
        out = rpearl(cfg, permute_graph(g, perm), z[:, perm]).data
        np.testing.assert_allclose(out, ref[perm], atol=1e-10)

    def test_variance_shrinks_with_samples_on_k5(self):
        k5 = build_laplacian(np.ones((5, 5)) - np.eye(5))
        spread = {}
        for m in (4, 64):
            vals = []
            for s in range(10):
                cfg = PEConfig.random(4, 3, 2, 2, np.random.default_rng(100), samples=m, seed=s)
                vals.append(np.median(rpearl(cfg, k5).data.std(axis=0)))
            spread[m] = np.median(vals)
        assert spread[64] < spread[4]

    def test_gradients(self):
        rng = np.random.default_rng(7)
        cfg = PEConfig.random(3, 2, 2, 3, rng, samples=3, kind="tanh")
        g = rand_graph(6, 3)
        w = rng.standard_normal((6, 2))
        params = {f"h{i}": h for i, h in enumerate(cfg.parameters())}
        errs = param_gradcheck(lambda: nc.sum_all(nc.mul(rpearl(cfg, g), Tensor(w))), params)
        assert max(errs.values()) < 1e-4
