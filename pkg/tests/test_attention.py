import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtx import numcore as nc
from gtx.attention import (
    MAGIC,
    AttentionParams,
    CheckpointError,
    ConfigError,
    GraphTransformer,
    ModelConfig,
    attention_weights_dense,
    dense_attention,
    gt_layer,
    load_checkpoint,
    save_checkpoint,
    sparse_attention,
)
from gtx.gradcheck import param_gradcheck
from gtx.graph import KHopMask, diameter, from_undirected, k_hop_mask
from gtx.numcore import ContractError, Tensor
from gtx.pe import random_ids
from gtx.selftest import permute_graph, random_connected_graph
from gtx.train import AdamState, TrainConfig, adam_step


def small_cfg(**kw):
    base = dict(in_dim=3, out_dim=2, d_model=8, heads=2, d_ff=12, pe_hidden=4, pe_dim=4, pe_samples=4)
    base.update(kw)
    return ModelConfig(**base)


def loop_attention(p: AttentionParams, x: np.ndarray, allowed=None) -> np.ndarray:
    """Scalar-loop reference: per head, per node, explicit softmax over attended nodes."""
    n = x.shape[1]
    heads = []
    for wq, wk, wv in zip(p.q, p.k, p.v):
        q, k, v = wq.data @ x, wk.data @ x, wv.data @ x
        out = np.zeros((v.shape[0], n))
        for i in range(n):
            js = [j for j in range(n) if allowed is None or allowed[i, j]]
            s = [sum(q[a, i] * k[a, j] for a in range(q.shape[0])) * p.score_scale for j in js]
            top = max(s)
            e = [np.exp(t - top) for t in s]
            tot = sum(e)
            for j, ej in zip(js, e):
                out[:, i] += ej / tot * v[:, j]
        heads.append(out)
    return p.out.data @ np.vstack(heads)


def path(n):
    return from_undirected([(i, i + 1) for i in range(n - 1)], n)


class TestDenseAttention:
    def test_identical_columns(self):
        rng = np.random.default_rng(0)
        p = AttentionParams.random(4, 2, 3, None, rng)
        x = np.repeat(rng.standard_normal((4, 1)), 5, axis=1)
        out = dense_attention(p, Tensor(x)).data
        np.testing.assert_allclose(out, np.repeat(out[:, :1], 5, axis=1), atol=1e-14)

    def test_single_node(self):
        rng = np.random.default_rng(1)
        p = AttentionParams.random(4, 2, 3, None, rng)
        x = rng.standard_normal((4, 1))
        expect = p.out.data @ np.vstack([v.data @ x for v in p.v])
        np.testing.assert_allclose(dense_attention(p, Tensor(x)).data, expect, rtol=1e-14)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        p = AttentionParams.random(5, 2, 3, None, rng)
        x = rng.standard_normal((5, 6))
        np.testing.assert_allclose(dense_attention(p, Tensor(x)).data, loop_attention(p, x), atol=1e-10)

    def test_shape_error(self):
        p = AttentionParams.random(5, 1, 2, None, np.random.default_rng(0))
        with pytest.raises(ContractError):
            dense_attention(p, Tensor(np.zeros((4, 3))))

    def test_unscaled_flag(self):
        p = AttentionParams.random(4, 1, 4, None, np.random.default_rng(0), unscaled_scores=True)
        assert p.score_scale == 1.0
        assert AttentionParams.random(4, 1, 4, None, np.random.default_rng(0)).score_scale == 0.5


class TestSparseAttention:
    def test_full_mask_equals_dense(self):
        rng = np.random.default_rng(3)
        p = AttentionParams.random(6, 3, 2, None, rng)
        x = Tensor(rng.standard_normal((6, 9)))
        np.testing.assert_allclose(sparse_attention(p, x, KHopMask.full(9)).data, dense_attention(p, x).data,
                                   atol=1e-10)

    def test_self_only(self):
        rng = np.random.default_rng(4)
        p = AttentionParams.random(4, 2, 2, None, rng)
        x = rng.standard_normal((4, 5))
        mask = KHopMask(5, np.arange(6), np.arange(5))
        expect = p.out.data @ np.vstack([v.data @ x for v in p.v])
        np.testing.assert_allclose(sparse_attention(p, Tensor(x), mask).data, expect, rtol=1e-13)

    def test_path_k1_matches_masked_dense(self):
        rng = np.random.default_rng(5)
        p = AttentionParams.random(4, 2, 3, None, rng)
        x = rng.standard_normal((4, 5))
        mask = k_hop_mask(path(5), 1)
        ref = dense_attention(p, Tensor(x), mask=mask.dense()).data
        np.testing.assert_allclose(sparse_attention(p, Tensor(x), mask).data, ref, atol=1e-10)
        np.testing.assert_allclose(ref, loop_attention(p, x, mask.dense()), atol=1e-10)

    def test_mask_size_mismatch(self):
        p = AttentionParams.random(4, 1, 2, None, np.random.default_rng(0))
        with pytest.raises(ContractError):
            sparse_attention(p, Tensor(np.zeros((4, 3))), KHopMask.full(4))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 20), st.integers(0, 2**31 - 1), st.integers(1, 3))
    def test_hook_rows_stochastic(self, n, seed, k):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(n, 0.2, rng)
        p = AttentionParams.random(4, 2, 2, None, rng)
        seen = []
        sparse_attention(p, Tensor(rng.standard_normal((4, n))), k_hop_mask(g, k), hook=seen.append)
        for att in seen:
            a = attention_weights_dense(att)
            assert np.all(a >= 0)
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


class TestGTLayer:
    def test_zero_weights_identity(self):
        rng = np.random.default_rng(6)
        p = AttentionParams.random(4, 2, 2, 6, rng)
        for _, t in p.named_parameters():
            if not _.startswith("ln"):
                t.data[...] = 0.0
        x = rng.standard_normal((4, 7))
        np.testing.assert_array_equal(gt_layer(p, Tensor(x)).data, x)

    def test_dense_sparse_full_mask(self):
        rng = np.random.default_rng(7)
        p = AttentionParams.random(6, 2, 3, 8, rng)
        x = Tensor(rng.standard_normal((6, 8)))
        np.testing.assert_allclose(gt_layer(p, x, "sparse_gt", KHopMask.full(8)).data, gt_layer(p, x).data,
                                   atol=1e-10)

    def test_sparse_requires_mask(self):
        p = AttentionParams.random(4, 1, 2, 4, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            gt_layer(p, Tensor(np.zeros((4, 3))), "sparse_gt")

    def test_gradient(self):
        rng = np.random.default_rng(8)
        p = AttentionParams.random(4, 2, 2, 6, rng)
        x = Tensor(rng.standard_normal((4, 7)))
        w = rng.standard_normal((4, 7))
        mask = k_hop_mask(path(7), 2)
        errs = param_gradcheck(lambda: nc.sum_all(nc.mul(gt_layer(p, x, "sparse_gt", mask), Tensor(w))),
                               dict(p.named_parameters()))
        assert max(errs.values()) < 1e-4


class TestModelConfig:
    def test_sparse_needs_hops(self):
        with pytest.raises(ConfigError):
            small_cfg(hops=0)

    def test_mlp_rejects_pe(self):
        with pytest.raises(ConfigError):
            small_cfg(mode="mlp_baseline")

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            small_cfg(mode="exphormer")

    def test_d_head_derived(self):
        assert small_cfg().d_head == 4
        with pytest.raises(ConfigError):
            small_cfg(d_model=9)

    def test_from_dict_rejects_unknown(self):
        d = small_cfg().to_dict()
        d["hop"] = 2
        with pytest.raises(ConfigError, match="hop"):
            ModelConfig.from_dict(d)


class TestModelForward:
    def test_mlp_ignores_graph(self):
        m = GraphTransformer(small_cfg(mode="mlp_baseline", use_pe=False))
        x = np.random.default_rng(0).standard_normal((3, 6))
        a = m.forward(path(6), x).data
        b = m.forward(random_connected_graph(6, 0.5, np.random.default_rng(1)), x).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_sparse_at_diameter_equals_dense(self, seed):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(int(rng.integers(5, 30)), 0.1, rng)
        cfg = small_cfg(hops=diameter(g), seed=seed)
        x = rng.standard_normal((3, g.n))
        a = GraphTransformer(cfg).forward(g, x).data
        b = GraphTransformer(small_cfg(mode="dense_gt", hops=diameter(g), seed=seed)).forward(g, x).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("mode", ["dense_gt", "sparse_gt", "gnn_baseline"])
    def test_permutation_equivariance(self, mode):
        rng = np.random.default_rng(9)
        g = random_connected_graph(12, 0.25, rng)
        m = GraphTransformer(small_cfg(mode=mode, expander_degree=0))
        x = rng.standard_normal((3, g.n))
        ids = random_ids(m.pe, g.n)
        perm = rng.permutation(g.n)
        ref = m.forward(g, x, pe_ids=ids).data
        out = m.forward(permute_graph(g, perm), x[:, perm], pe_ids=ids[:, perm]).data
        np.testing.assert_allclose(out, ref[:, perm], atol=1e-10)

    def test_expander_edges_widen_mask(self):
        g = path(10)
        m = GraphTransformer(small_cfg(hops=1, expander_degree=3))
        assert m.mask_for(g).nnz > k_hop_mask(g, 1).nnz

    def test_feature_shape_checked(self):
        m = GraphTransformer(small_cfg())
        with pytest.raises(ContractError):
            m.forward(path(4), np.zeros((2, 4)))
        with pytest.raises(ContractError):
            m.forward(path(4), np.zeros((3, 5)))

    def test_dropout_only_in_training(self):
        m = GraphTransformer(small_cfg(dropout=0.5))
        x = np.random.default_rng(0).standard_normal((3, 6))
        g = path(6)
        np.testing.assert_array_equal(m.forward(g, x).data, m.forward(g, x, rng=np.random.default_rng(1)).data)
        assert not np.array_equal(m.forward(g, x).data, m.forward(g, x, train=True, rng=np.random.default_rng(1)).data)

    def test_outputs_finite(self):
        m = GraphTransformer(small_cfg(task="embed", out_dim=5))
        out = m.forward(path(7), np.random.default_rng(0).standard_normal((3, 7)) * 100)
        assert out.shape == (5, 7) and np.all(np.isfinite(out.data))


class TestOperatorNorm:
    def test_clamp_after_adam_step(self):
        m = GraphTransformer(small_cfg(op_norm_budget=0.5))
        params, blocks = m.parameters(), m.attention_blocks()
        grads = {k: np.random.default_rng(1).standard_normal(p.shape) for k, p in params.items()}
        adam_step(params, grads, AdamState(), TrainConfig(lr=0.5, op_norm_budget=0.5), blocks)
        for blk in blocks:
            for t in (*blk.q, *blk.k, *blk.v):
                assert nc.spectral_norm(t.data, iters=50) <= 0.5 + 1e-8


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = GraphTransformer(small_cfg(mode="dense_gt", seed=4))
        save_checkpoint(tmp_path / "m.gttx", m, {"k": [1, 2]})
        back, extra = load_checkpoint(tmp_path / "m.gttx")
        assert extra == {"k": [1, 2]}
        assert back.cfg == m.cfg
        for (na, a), (nb, b) in zip(m.named_parameters(), back.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)

    def test_layout(self, tmp_path):
        m = GraphTransformer(small_cfg())
        save_checkpoint(tmp_path / "m.gttx", m)
        raw = (tmp_path / "m.gttx").read_bytes()
        assert raw[:5] == MAGIC
        (length,) = struct.unpack("<Q", raw[5:13])
        total = sum(t.data.size for _, t in m.named_parameters())
        assert len(raw) == 13 + length + 8 * total
        first = m.named_parameters()[0][1].data
        np.testing.assert_array_equal(np.frombuffer(raw[13 + length:13 + length + 8 * first.size], "<f8"),
                                      first.ravel())

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE!" + bytes(8))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.gttx", GraphTransformer(small_cfg()))
        raw = (tmp_path / "m.gttx").read_bytes()
        (tmp_path / "t.gttx").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "t.gttx")
