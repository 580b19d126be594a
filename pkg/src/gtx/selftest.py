"""Fast invariant checks run by ``gtx selftest``."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attention import AttentionParams, GraphTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .gradcheck import operation_checks
from .graph import Graph, build_laplacian, diameter
from .manifold import ManifoldSpec, calibrated_spectrum, mt_reference, sample_manifold
from .pe import random_ids
from .rng import substream
from .terrain import dijkstra_spd
from .train import spd_metric_loss


def random_connected_graph(n: int, p: float, rng) -> Graph:
    """Erdos-Renyi draw with a random spanning path added so it is connected."""
    a = np.triu(rng.random((n, n)) < p, 1).astype(float)
    order = rng.permutation(n)
    a[order[:-1], order[1:]] = 1.0
    a = np.maximum(a, a.T) * rng.uniform(0.5, 1.5, (n, n))
    a = np.triu(a, 1)
    return build_laplacian(a + a.T)


def permute_graph(g, perm: np.ndarray):
    """Relabel so that new node ``k`` is old node ``perm[k]``."""
    a = g.adjacency[perm][:, perm]
    coords = None if g.coords is None else g.coords[perm]
    return build_laplacian(a, coords=coords)


def bellman_ford(n: int, edges, source: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    for _ in range(n - 1):
        changed = False
        for i, j, w in edges:
            i, j = int(i), int(j)
            for u, v in ((i, j), (j, i)):
                if dist[u] + w < dist[v]:
                    dist[v] = dist[u] + w
                    changed = True
        if not changed:
            break
    return dist


def _check_dense_sparse(seed: int) -> float:
    rng = substream(seed, "sampling", "selftest-dense")
    worst = 0.0
    for t in range(3):
        g = random_connected_graph(int(rng.integers(8, 24)), 0.15, rng)
        cfg = ModelConfig(in_dim=3, out_dim=2, mode="sparse_gt", hops=diameter(g), d_model=8, heads=2, d_ff=8,
                          pe_hidden=4, pe_dim=4, pe_samples=4, seed=seed + t)
        x = rng.standard_normal((3, g.n))
        a = GraphTransformer(cfg).forward(g, x).data
        b = GraphTransformer(ModelConfig(**{**cfg.to_dict(), "mode": "dense_gt"})).forward(g, x).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def _check_permutation(seed: int) -> float:
    rng = substream(seed, "sampling", "selftest-perm")
    g = random_connected_graph(15, 0.2, rng)
    cfg = ModelConfig(in_dim=3, out_dim=2, mode="sparse_gt", hops=2, d_model=8, heads=2, d_ff=8, pe_hidden=4,
                      pe_dim=4, pe_samples=4, seed=seed)
    model = GraphTransformer(cfg)
    x = rng.standard_normal((3, g.n))
    ids = random_ids(model.pe, g.n)
    perm = rng.permutation(g.n)
    ref = model.forward(g, x, pe_ids=ids).data
    out = model.forward(permute_graph(g, perm), x[:, perm], pe_ids=ids[:, perm]).data
    return float(np.abs(out - ref[:, perm]).max())


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []

    def record(name, ok, detail):
        results.append((name, bool(ok), detail))

    ops = operation_checks(seed)
    worst = max(ops, key=lambda r: r[1])
    record("gradcheck_ops", worst[1] < 1e-4, f"worst {worst[0]} {worst[1]:.2e}")
    err = _check_dense_sparse(seed)
    record("dense_sparse_equivalence", err <= 1e-9, f"max abs diff {err:.2e}")
    err = _check_permutation(seed)
    record("permutation_equivariance", err <= 1e-10, f"max abs diff {err:.2e}")

    s = np.random.default_rng(seed).standard_normal((6, 6))
    mask = np.random.default_rng(seed + 1).random((6, 6)) < 0.5
    mask[np.arange(6), np.arange(6)] = True
    p = nc.masked_row_softmax(nc.Tensor(s), mask).data
    record("softmax_rows", np.abs(p.sum(1) - 1).max() <= 1e-12 and np.all(p[~mask] == 0), "rows sum to one")

    circle = ManifoldSpec("circle")
    ev, _ = calibrated_spectrum(sample_manifold(circle, 512, seed), 2)
    record("circle_first_eigenvalue", abs(ev[1] - 1) < 0.15, f"calibrated lambda_1 {ev[1]:.4f}")

    rng = substream(seed, "sampling", "selftest-bf")
    g = random_connected_graph(20, 0.2, rng)
    d = dijkstra_spd(g, 0)
    bf = bellman_ford(g.n, g.edges(), 0)
    record("dijkstra_vs_bellman_ford", np.array_equal(d, bf), "exact match" if np.array_equal(d, bf) else "mismatch")

    model = GraphTransformer(ModelConfig(in_dim=2, out_dim=3, d_model=8, heads=2, d_ff=8, pe_hidden=4, pe_dim=4,
                                         pe_samples=4, seed=seed))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.gttx"
        save_checkpoint(path, model, {"note": "selftest"})
        back, extra = load_checkpoint(path)
    same = all(np.array_equal(a.data, b.data) for (_, a), (_, b) in zip(model.named_parameters(),
                                                                         back.named_parameters()))
    record("checkpoint_roundtrip", same and extra == {"note": "selftest"}, "bit-exact" if same else "differs")

    emb = nc.Tensor(np.random.default_rng(seed).standard_normal((3, 8)))
    pairs = np.array([[0, 1, 1.0], [2, 5, 2.0], [7, 3, 0.5]])
    shifted = nc.Tensor(emb.data + np.array([[1.0], [-2.0], [0.5]]))
    gap = abs(spd_metric_loss(emb, pairs).item() - spd_metric_loss(shifted, pairs).item())
    record("spd_translation_invariance", gap <= 1e-12, f"gap {gap:.1e}")

    att = AttentionParams.random(2, 1, 2, None, np.random.default_rng(seed), unscaled_scores=True)
    quad = sample_manifold(circle, 256, seed)
    f = quad.points.T
    a = mt_reference(att, f, quad, f[:, :16], quad.points[:16]).data
    b = mt_reference(att, f, quad, f[:, :16], quad.points[:16], radius=np.inf).data
    record("restricted_mt_infinite_radius", np.array_equal(a, b), "exact")
    return results
