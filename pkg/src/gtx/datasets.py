"""Synthetic node-classification tasks on sphere samples, sized for subsampling.

Both generators return a :class:`NodeDataset` whose full graph is a radius
graph with weights ``1 / (n * cap)`` (``cap`` is the fraction of the sphere
covered by one ball), so that degrees approximate the local sample density
and stay comparable after induced subsampling with weight rescaling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, induced_subgraph, radius_graph, subsample_graph
from .manifold import ManifoldSpec, analytic_spectrum, sample_manifold
from .numcore import ContractError
from .rng import substream
from .train import TrainData

SPHERE = ManifoldSpec("sphere_2d")


@dataclass
class NodeDataset:
    name: str
    points: np.ndarray
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def in_dim(self) -> int:
        return self.features.shape[0]

    def _split_graph(self, nodes: np.ndarray, alpha: float, seed: int, tag: str):
        pool = induced_subgraph(self.graph, nodes, rescale=self.graph.n / len(nodes))
        sub, kept = subsample_graph(pool, alpha, substream(seed, "sampling", tag, len(nodes)), rescale=True)
        return sub, nodes[kept]

    def train_data(self, alpha: float, seed: int) -> TrainData:
        """Induced subgraph on a fraction ``alpha`` of the train and validation nodes."""
        pool = np.union1d(self.train_idx, self.val_idx)
        g, nodes = self._split_graph(pool, alpha, seed, "train")
        is_train = np.isin(nodes, self.train_idx)
        return TrainData(g, self.features[:, nodes], self.labels[nodes],
                         np.flatnonzero(is_train), np.flatnonzero(~is_train))

    def test_data(self, alpha: float, seed: int) -> tuple[Graph, np.ndarray, np.ndarray]:
        """Induced subgraph on a fraction ``alpha`` of the test nodes."""
        g, nodes = self._split_graph(np.sort(self.test_idx), alpha, seed, "test")
        return g, self.features[:, nodes], self.labels[nodes]


def split_indices(n: int, seed: int, fractions=(0.45, 0.10, 0.45)):
    if abs(sum(fractions) - 1.0) > 1e-12:
        raise ContractError(f"split fractions must sum to 1, got {fractions}")
    perm = substream(seed, "sampling", "split", n).permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])


def _smooth_field(points: np.ndarray, rng, degrees=(1, 2)) -> np.ndarray:
    """Random combination of real spherical harmonics, standardised over the points."""
    lmax = max(degrees)
    basis = analytic_spectrum(SPHERE, (lmax + 1) ** 2)
    ells = np.floor(np.sqrt(np.arange(basis.band))).astype(int)
    coef = rng.standard_normal(basis.band) * np.isin(ells, degrees)
    f = basis.evaluate(points) @ coef
    return (f - f.mean()) / f.std()


def _weighted_radius_graph(points: np.ndarray, radius: float) -> Graph:
    cap = radius * radius / 4.0  # area fraction of a chordal ball on the unit sphere
    return radius_graph(points, radius, weight=1.0 / (len(points) * cap))


def community_task(n: int = 4000, seed: int = 0, radius: float = 0.25, noise: float = 2.0,
                   feature_dim: int = 4, degrees=(1,)) -> NodeDataset:
    """Two smooth communities on the sphere with homophilic labels and noisy features.

    Labels threshold a random harmonic field of the given ``degrees`` at its median.  Each node's
    features are its class mean plus isotropic Gaussian noise of scale
    ``noise``, so single-node classification is weak and neighbourhood
    aggregation pays off.
    """
    rng = substream(seed, "sampling", "community")
    pts = sample_manifold(SPHERE, n, seed).points
    field = _smooth_field(pts, rng, degrees)
    labels = (field > np.median(field)).astype(np.int64)
    means = rng.standard_normal((feature_dim, 2))
    means /= np.linalg.norm(means, axis=0)
    feats = means[:, labels] + noise * rng.standard_normal((feature_dim, n))
    tr, va, te = split_indices(n, seed)
    return NodeDataset("community", pts, _weighted_radius_graph(pts, radius), feats, labels, tr, va, te)


def _sample_density(n: int, rng, contrast: float):
    """Rejection sampling from ``rho ~ 1 + contrast * h`` with ``h`` a smooth field in [-1, 1]."""
    probe = rng.standard_normal((4096, 3))
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    basis = analytic_spectrum(SPHERE, 9)
    coef = rng.standard_normal(9) * (np.arange(9) >= 1)
    span = np.abs(basis.evaluate(probe) @ coef).max() * 1.05
    out = []
    while sum(len(o) for o in out) < n:
        cand = rng.standard_normal((2 * n, 3))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        h = np.clip(basis.evaluate(cand) @ coef / span, -1, 1)
        keep = rng.uniform(0, 1 + contrast, len(cand)) < 1 + contrast * h
        out.append(cand[keep])
    pts = np.vstack(out)[:n]
    h = np.clip(basis.evaluate(pts) @ coef / span, -1, 1)
    return pts, 1 + contrast * h


def structure_task(n: int = 4000, seed: int = 0, radius: float = 0.22, contrast: float = 0.7,
                   density_weight: float = 1.0, noise: float = 1.0) -> NodeDataset:
    """Labels that need both local feature smoothing and the sampling density.

    Nodes are drawn from a non-uniform density ``rho``.  The only feature is a
    smooth field ``u`` plus noise; the label is ``1[w * z(rho) - u > median]``
    with ``z`` the standardised density.  A model must read density off graph
    structure (degrees, multi-hop counts) and average ``u`` over neighbours to
    do well, so positional encodings and masking both matter.
    """
    rng = substream(seed, "sampling", "structure")
    pts, rho = _sample_density(n, rng, contrast)
    u = _smooth_field(pts, rng, degrees=(1, 2, 3))
    z = (rho - rho.mean()) / rho.std()
    score = density_weight * z - u
    labels = (score > np.median(score)).astype(np.int64)
    feats = (u + noise * rng.standard_normal(n))[None, :]
    tr, va, te = split_indices(n, seed)
    return NodeDataset("structure", pts, _weighted_radius_graph(pts, radius), feats, labels, tr, va, te)


def make_dataset(name: str, **kw) -> NodeDataset:
    makers = {"community": community_task, "structure": structure_task}
    if name not in makers:
        raise ContractError(f"unknown dataset {name!r}; choose from {sorted(makers)}")
    return makers[name](**kw)


def expected_degree(n: int, radius: float) -> float:
    return n * radius * radius / 4.0 if radius < 2 else float(n - 1)

