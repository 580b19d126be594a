"""Central-difference checks of every differentiable operation and the full model."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import numcore as nc
from .attention import AttentionParams, GraphTransformer, ModelConfig, dense_attention, gt_layer
from .graph import from_undirected, k_hop_mask
from .numcore import Tensor
from .pe import FilterBank, PEConfig, graph_conv, rpearl
from .rng import substream
from .train import cross_entropy, spd_metric_loss


def param_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-6) -> dict[str, float]:
    """Relative error per parameter tensor, perturbing each entry in place."""
    grads = nc.backward(loss_fn())
    out = {}
    for name, p in params.items():
        analytic = grads.get(p, np.zeros(p.shape))
        numeric = np.zeros(p.shape)
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + step
            fp = loss_fn().item()
            p.data[idx] = orig - step
            fm = loss_fn().item()
            p.data[idx] = orig
            numeric[idx] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        out[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return out


def _ring_graph(n: int, seed: int):
    rng = substream(seed, "sampling", "gradcheck", n)
    edges = [(i, (i + 1) % n, 0.5 + rng.random()) for i in range(n)]
    edges += [(i, (i + 3) % n, 0.5 + rng.random()) for i in range(0, n, 2)]
    return from_undirected(edges, n)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def operation_checks(seed: int = 0, step: float = 1e-6) -> list[tuple[str, float]]:
    """One row per differentiable primitive (and per argument of multi-input ones)."""
    rng = substream(seed, "init", "gradcheck")
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    fdc = lambda f, x: nc.finite_diff_check(f, x, step)  # noqa: E731

    def proj(t: Tensor, w: np.ndarray) -> Tensor:
        return nc.sum_all(nc.mul(t, Tensor(w)))

    a, b = r(3, 4), r(3, 4)
    w34, w44 = r(3, 4), r(4, 4)
    rows = []
    rows.append(("add", fdc(lambda x: proj(nc.add(x, Tensor(b)), w34), a)))
    rows.append(("add_broadcast", fdc(lambda x: proj(nc.add(Tensor(a), x), w34), r(3, 1))))
    rows.append(("sub", fdc(lambda x: proj(nc.sub(Tensor(b), x), w34), a)))
    rows.append(("mul", fdc(lambda x: proj(nc.mul(x, Tensor(b)), w34), a)))
    rows.append(("scale", fdc(lambda x: proj(nc.scale(x, -1.7), w34), a)))
    rows.append(("square", fdc(lambda x: proj(nc.square(x), w34), a)))
    rows.append(("absolute", fdc(lambda x: proj(nc.absolute(x), w34), _away_from_zero(rng, (3, 4)))))
    rows.append(("exp", fdc(lambda x: proj(nc.exp(x), w34), a)))
    rows.append(("relu", fdc(lambda x: proj(nc.relu(x), w34), _away_from_zero(rng, (3, 4)))))
    rows.append(("tanh", fdc(lambda x: proj(nc.tanh(x), w34), a)))
    m57, m73 = r(5, 7), r(7, 3)
    w53 = r(5, 3)
    rows.append(("matmul_left", fdc(lambda x: proj(nc.matmul(x, Tensor(m73)), w53), m57)))
    rows.append(("matmul_right", fdc(lambda x: proj(nc.matmul(Tensor(m57), x), w53), m73)))
    op = r(4, 4)
    rows.append(("right_matmul_const", fdc(lambda x: proj(nc.right_matmul_const(x, op), w34), a)))
    g = _ring_graph(4, seed)
    rows.append(("right_matmul_sparse", fdc(lambda x: proj(nc.right_matmul_const(x, g.laplacian), w34), a)))
    w43, w64, w24 = r(4, 3), r(6, 4), r(2, 4)
    w13, w14, w31 = r(1, 3), r(1, 4), r(3, 1)
    rows.append(("transpose", fdc(lambda x: proj(nc.transpose(x), w43), a)))
    rows.append(("concat_rows", fdc(lambda x: proj(nc.concat_rows([x, Tensor(b)]), w64), a)))
    rows.append(("row_slice", fdc(lambda x: proj(nc.row_slice(x, 1, 3), w24), a)))
    idx = np.array([3, 0, 0, 2])
    rows.append(("gather_cols", fdc(lambda x: proj(nc.gather_cols(x, idx), w34), a)))
    rows.append(("take", fdc(lambda x: proj(nc.take(x, [0, 2, 1], [1, 3, 1]), w13), a)))
    rows.append(("sum_all", fdc(lambda x: nc.scale(nc.sum_all(nc.square(x)), 0.5), a)))
    rows.append(("mean_all", fdc(lambda x: nc.mean_all(nc.mul(x, Tensor(w34))), a)))
    rows.append(("sum_axis0", fdc(lambda x: proj(nc.sum_axis(nc.square(x), 0), w14), a)))
    rows.append(("sum_axis1", fdc(lambda x: proj(nc.sum_axis(nc.square(x), 1), w31), a)))
    mask = rng.random((4, 4)) < 0.6
    mask[np.arange(4), np.arange(4)] = True
    rows.append(("masked_row_softmax", fdc(lambda x: proj(nc.masked_row_softmax(x, mask), w44), r(4, 4))))
    rows.append(("log_softmax", fdc(lambda x: proj(nc.log_softmax(x, 0), w34), a)))
    gain, bias = r(3, 1), r(3, 1)
    rows.append(("layer_norm_x", fdc(lambda x: proj(nc.layer_norm(x, Tensor(gain), Tensor(bias)), w34), a)))
    rows.append(("layer_norm_gain", fdc(lambda x: proj(nc.layer_norm(Tensor(a), x, Tensor(bias)), w34), gain)))
    rows.append(("layer_norm_bias", fdc(lambda x: proj(nc.layer_norm(Tensor(a), Tensor(gain), x), w34), bias)))
    rows.append(("dropout", fdc(lambda x: proj(nc.dropout(x, 0.3, np.random.default_rng(5)), w34), a)))
    km = k_hop_mask(g, 1)
    q, k, v = r(3, 4), r(3, 4), r(2, 4)

    def att(qq, kk, vv):
        return nc.edge_attention(qq, kk, vv, km.indptr, km.indices, 0.7)

    rows.append(("edge_attention_q", fdc(lambda x: proj(att(x, Tensor(k), Tensor(v)), w24), q)))
    rows.append(("edge_attention_k", fdc(lambda x: proj(att(Tensor(q), x, Tensor(v)), w24), k)))
    rows.append(("edge_attention_v", fdc(lambda x: proj(att(Tensor(q), Tensor(k), x), w24), v)))
    bank = FilterBank([Tensor(r(3, 2)) for _ in range(3)])
    rows.append(("graph_conv_input", fdc(lambda x: proj(graph_conv(bank, g, x), w34), r(2, 4))))
    z = Tensor(r(2, 4))
    rows.append(("graph_conv_tap", fdc(
        lambda x: proj(graph_conv(FilterBank([bank.coefficients[0], x, bank.coefficients[2]]), g, z), w34), r(3, 2))))
    labels = np.array([0, 2, 1, 2])
    rows.append(("cross_entropy", fdc(lambda x: cross_entropy(x, labels, [0, 1, 3]), r(3, 4))))
    pairs = np.array([[0, 1, 2.5], [1, 3, 0.7], [2, 0, 1.9]])
    rows.append(("spd_metric_loss", fdc(lambda x: spd_metric_loss(x, pairs), r(3, 4))))
    return rows


def model_checks(seed: int = 0, step: float = 1e-6) -> list[tuple[str, float]]:
    """Whole-network checks: dense attention, one GT layer, RPEARL, and sparse GT + RPEARL end to end."""
    rng = substream(seed, "init", "gradcheck-model")
    n = 10
    g = _ring_graph(n, seed)
    rows = []
    p = AttentionParams.random(4, 2, 3, 6, rng)
    x = Tensor(rng.standard_normal((4, n)))
    w = rng.standard_normal((4, n))
    params = dict(p.named_parameters())
    errs = param_gradcheck(lambda: nc.sum_all(nc.mul(dense_attention(p, x), Tensor(w))), params, step)
    rows.append(("dense_attention", max(errs[k] for k in errs if not k.startswith(("ff", "ln")))))
    mask = k_hop_mask(g, 2)
    errs = param_gradcheck(lambda: nc.sum_all(nc.mul(gt_layer(p, x, "sparse_gt", mask), Tensor(w))), params, step)
    rows.append(("gt_layer_sparse", max(errs.values())))
    pe = PEConfig.random(3, 4, 2, 3, rng, samples=4, seed=seed, kind="tanh")
    ids = substream(seed, "pe", n).standard_normal((4, n))
    wpe = rng.standard_normal((n, 4))
    pe_params = {f"h{i}": t for i, t in enumerate(pe.parameters())}
    errs = param_gradcheck(lambda: nc.sum_all(nc.mul(rpearl(pe, g, ids), Tensor(wpe))), pe_params, step)
    rows.append(("rpearl", max(errs.values())))
    cfg = ModelConfig(in_dim=3, out_dim=3, mode="sparse_gt", layers=2, heads=2, d_model=6, d_ff=8, hops=2,
                      pe_hidden=4, pe_dim=3, pe_layers=2, pe_order=3, pe_samples=4, pe_kind="tanh", seed=seed,
                      expander_degree=2)
    model = GraphTransformer(cfg)
    feats = rng.standard_normal((3, n))
    labels = rng.integers(0, 3, n)
    errs = param_gradcheck(lambda: cross_entropy(model.forward(g, feats), labels), model.parameters(), step)
    rows.append(("sparse_gt_rpearl_forward", max(errs.values())))
    dense = GraphTransformer(ModelConfig(**{**cfg.to_dict(), "mode": "dense_gt", "expander_degree": 0}))
    errs = param_gradcheck(lambda: cross_entropy(dense.forward(g, feats), labels), dense.parameters(), step)
    rows.append(("dense_gt_rpearl_forward", max(errs.values())))
    return rows


def run_gradcheck(seed: int = 0, step: float = 1e-6) -> list[tuple[str, float]]:
    return operation_checks(seed, step) + model_checks(seed, step)

