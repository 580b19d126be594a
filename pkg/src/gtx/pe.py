"""RPEARL positional encodings: graph-convolution banks driven by random node IDs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .graph import Graph
from .numcore import ContractError, Tensor
from .rng import substream


@dataclass
class FilterBank:
    """Order-K convolution taps ``H_0 .. H_{K-1}``, each ``out_dim x in_dim``."""

    coefficients: list[Tensor]

    def __post_init__(self):
        if not self.coefficients:
            raise ContractError("a filter bank needs at least one tap")
        shapes = {c.shape for c in self.coefficients}
        if len(shapes) != 1:
            raise ContractError(f"filter taps disagree in shape: {sorted(shapes)}")

    @property
    def order(self) -> int:
        return len(self.coefficients)

    @property
    def out_dim(self) -> int:
        return self.coefficients[0].rows

    @property
    def in_dim(self) -> int:
        return self.coefficients[0].cols

    @classmethod
    def random(cls, out_dim: int, in_dim: int, order: int, rng: np.random.Generator, gain: float = 1.0):
        std = gain / np.sqrt(in_dim * order)
        return cls([nc.parameter(rng.normal(0.0, std, (out_dim, in_dim))) for _ in range(order)])

    def frequency_response(self, lam) -> np.ndarray:
        """``sum_k H_k exp(-k lam)`` for each entry of ``lam``; shape ``(len(lam), out, in)``."""
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        taps = np.stack([c.data for c in self.coefficients])
        powers = np.exp(-np.outer(lam, np.arange(self.order)))
        return np.einsum("lk,koi->loi", powers, taps)


@dataclass
class PEConfig:
    layers: list[tuple[FilterBank, str]]
    samples: int = 16
    seed: int = 0
    operator: str = "laplacian"
    out_dim: int = field(init=False)

    def __post_init__(self):
        if self.samples < 1:
            raise ContractError("need at least one random sample")
        for (a, _), (b, _) in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ContractError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[0][0].in_dim != 1:
            raise ContractError("the first bank consumes scalar random IDs (in_dim must be 1)")
        self.out_dim = self.layers[-1][0].out_dim

    @classmethod
    def random(cls, hidden: int, out_dim: int, num_layers: int, order: int, rng, *,
               samples: int = 16, seed: int = 0, kind: str = "relu", operator: str = "laplacian"):
        dims = [1] + [hidden] * (num_layers - 1) + [out_dim]
        layers = [(FilterBank.random(o, i, order, rng), kind) for i, o in zip(dims, dims[1:])]
        return cls(layers, samples=samples, seed=seed, operator=operator)

    def parameters(self) -> list[Tensor]:
        return [c for bank, _ in self.layers for c in bank.coefficients]


def shift_operator(g: Graph, kind: str = "laplacian"):
    """The matrix powered inside the convolution.

    ``laplacian`` is ``L`` itself; ``laplacian_maxdeg`` divides by the largest
    weighted degree so the spectrum sits in ``[0, 2]`` whatever the edge scale.
    """
    if kind == "laplacian":
        return g.laplacian
    if kind == "laplacian_maxdeg":
        dmax = g.degrees.max() if g.n else 0.0
        return g.laplacian / dmax if dmax > 0 else g.laplacian
    raise ContractError(f"unknown shift operator {kind!r}")


def _as_shift(shift):
    return shift.laplacian if isinstance(shift, Graph) else shift


def graph_conv(bank: FilterBank, shift, z: Tensor) -> Tensor:
    """``sum_k H_k Z S^k`` with ``S`` the graph Laplacian (or a given shift matrix).

    Powers of ``S`` are applied by repeated right-multiplication; ``S^k`` is
    never formed.
    """
    s = _as_shift(shift)
    z = nc.as_tensor(z)
    if z.rows != bank.in_dim:
        raise ContractError(f"signal has {z.rows} channels, bank expects {bank.in_dim}")
    if z.cols != s.shape[0]:
        raise ContractError(f"signal has {z.cols} nodes, operator is {s.shape}")
    out = nc.matmul(bank.coefficients[0], z)
    y = z
    for h in bank.coefficients[1:]:
        y = nc.right_matmul_const(y, s)
        out = nc.add(out, nc.matmul(h, y))
    return out


def gnn_forward(layers: Sequence[tuple[FilterBank, str]], shift, z: Tensor) -> Tensor:
    s = _as_shift(shift)
    for bank, kind in layers:
        z = nc.pointwise_nonlinearity(graph_conv(bank, s, z), kind)
    return z


def random_ids(cfg: PEConfig, n: int) -> np.ndarray:
    """The ``samples x n`` standard-normal node IDs for a graph of ``n`` nodes."""
    return substream(cfg.seed, "pe", n).standard_normal((cfg.samples, n))


def rpearl(cfg: PEConfig, g: Graph, z: np.ndarray | None = None) -> Tensor:
    """Mean over ``M`` random-ID branches of the GNN output, as an ``n x out_dim`` tensor.

    Branches are laid side by side along the node axis and share one
    block-diagonal operator, so all of them run in a single pass.
    """
    n = g.n
    if z is None:
        z = random_ids(cfg, n)
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if z.shape != (m, n):
        raise ContractError(f"random IDs must be (samples, {n}), got {z.shape}")
    s = shift_operator(g, cfg.operator)
    block = sp.kron(sp.identity(m, format="csr"), s, format="csr") if m > 1 else s
    out = gnn_forward(cfg.layers, block, Tensor(z.reshape(1, m * n)))
    pool = sp.kron(np.full((m, 1), 1.0 / m), sp.identity(n, format="csr"), format="csr")
    return nc.transpose(nc.right_matmul_const(out, pool))
