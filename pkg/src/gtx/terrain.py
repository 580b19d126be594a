"""Terrain shortest-path metric learning on elevation grids.

DEM text format: the first line is ``nrows ncols cell_size``, followed by
``nrows`` lines of ``ncols`` whitespace-separated elevations.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .attention import ConfigError, GraphTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .graph import Graph, GraphValidationError, build_laplacian
from .numcore import ContractError, GTXError
from .rng import substream
from .train import TrainConfig, TrainData, l1_distances, train_model

log = logging.getLogger(__name__)

FIXTURE = "hills60.dem"


class DEMParseError(GTXError, ValueError):
    pass


@dataclass
class ElevationGrid:
    cell_size: float
    elevations: np.ndarray

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        if self.elevations.ndim != 2 or min(self.elevations.shape) < 2:
            raise GraphValidationError(f"elevation grid must be at least 2x2, got {self.elevations.shape}")
        if not np.all(np.isfinite(self.elevations)):
            raise GraphValidationError("elevations must be finite")
        if not self.cell_size > 0:
            raise GraphValidationError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def nrows(self) -> int:
        return self.elevations.shape[0]

    @property
    def ncols(self) -> int:
        return self.elevations.shape[1]


def save_dem(grid: ElevationGrid, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{grid.nrows} {grid.ncols} {grid.cell_size!r}\n")
        for row in grid.elevations:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_dem(path) -> ElevationGrid:
    lines = [ln for ln in Path(path).read_text().splitlines()]
    if not lines:
        raise DEMParseError(f"{path}:1: empty file")
    head = lines[0].split()
    try:
        nrows, ncols, cell = int(head[0]), int(head[1]), float(head[2])
        if len(head) != 3:
            raise ValueError
    except (ValueError, IndexError):
        raise DEMParseError(f"{path}:1: header must be 'nrows ncols cell_size', got {lines[0]!r}") from None
    rows = []
    for i in range(nrows):
        lineno = i + 2
        if lineno > len(lines):
            raise DEMParseError(f"{path}:{lineno}: expected {nrows} data rows, file ends after {i}")
        try:
            vals = [float(v) for v in lines[i + 1].split()]
        except ValueError:
            raise DEMParseError(f"{path}:{lineno}: non-numeric elevation") from None
        if len(vals) != ncols:
            raise DEMParseError(f"{path}:{lineno}: expected {ncols} values, got {len(vals)}")
        rows.append(vals)
    extra = [ln for ln in lines[nrows + 1:] if ln.strip()]
    if extra:
        raise DEMParseError(f"{path}:{nrows + 2}: unexpected data after the last row")
    return ElevationGrid(cell, np.array(rows))


def gaussian_hills(nrows: int = 60, ncols: int = 60, cell_size: float = 1.0, hills: int = 6,
                   seed: int = 0, height: float = 12.0) -> ElevationGrid:
    """Sum of random Gaussian bumps; the shipped fixture is ``gaussian_hills()``."""
    rng = substream(seed, "sampling", "hills")
    ii, jj = np.meshgrid(np.arange(nrows), np.arange(ncols), indexing="ij")
    z = np.zeros((nrows, ncols))
    for _ in range(hills):
        ci, cj = rng.uniform(0, nrows - 1), rng.uniform(0, ncols - 1)
        s = rng.uniform(0.08, 0.18) * min(nrows, ncols)
        h = rng.uniform(0.4, 1.0) * height
        z += h * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * s * s))
    return ElevationGrid(cell_size, np.round(z, 6))


def load_fixture() -> ElevationGrid:
    with resources.as_file(resources.files("gtx") / "data" / FIXTURE) as p:
        return load_dem(p)


def downsample_grid(grid: ElevationGrid, stride: int) -> ElevationGrid:
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    z = grid.elevations[::stride, ::stride]
    if min(z.shape) < 2:
        raise GraphValidationError(f"stride {stride} leaves a degenerate {z.shape} grid")
    return ElevationGrid(grid.cell_size * stride, z.copy())


def grid_coords(grid: ElevationGrid) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(grid.nrows), np.arange(grid.ncols), indexing="ij")
    return np.column_stack([jj.ravel() * grid.cell_size, ii.ravel() * grid.cell_size, grid.elevations.ravel()])


def grid_edge_count(nrows: int, ncols: int) -> int:
    return nrows * (ncols - 1) + (nrows - 1) * ncols + 2 * (nrows - 1) * (ncols - 1)


def grid_graph_8nn(grid: ElevationGrid) -> Graph:
    """8-neighbour lattice with 3-D Euclidean edge lengths as weights."""
    r, c = grid.nrows, grid.ncols
    idx = np.arange(r * c).reshape(r, c)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),
        (idx[:-1, :], idx[1:, :]),
        (idx[:-1, :-1], idx[1:, 1:]),
        (idx[:-1, 1:], idx[1:, :-1]),
    ]
    src = np.concatenate([a.ravel() for a, _ in pairs])
    dst = np.concatenate([b.ravel() for _, b in pairs])
    xyz = grid_coords(grid)
    w = np.linalg.norm(xyz[src] - xyz[dst], axis=1)
    a = sp.coo_matrix((np.r_[w, w], (np.r_[src, dst], np.r_[dst, src])), shape=(r * c, r * c))
    return build_laplacian(a.tocsr(), coords=xyz)


def dijkstra_spd(g: Graph, source) -> np.ndarray:
    """Exact shortest-path lengths from one source (or a row per source); unreachable is inf."""
    if g.weights.size and g.weights.min() < 0:
        raise ContractError("negative edge weight; shortest paths need non-negative weights")
    return dijkstra(g.adjacency, directed=False, indices=source)


@dataclass
class PairSet:
    src: np.ndarray
    dst: np.ndarray
    spd: np.ndarray

    def __len__(self):
        return len(self.spd)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.src, self.dst, self.spd]).astype(np.float64)

    def check(self, coords: np.ndarray | None = None) -> None:
        if coords is not None:
            straight = np.linalg.norm(coords[self.src] - coords[self.dst], axis=1)
            bad = np.flatnonzero(self.spd < straight - 1e-9)
            if bad.size:
                k = int(bad[0])
                raise ContractError(f"pair ({self.src[k]}, {self.dst[k]}) has SPD below the straight-line distance")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "spd"])
            w.writerows((int(a), int(b), repr(float(d))) for a, b, d in zip(self.src, self.dst, self.spd))

    @classmethod
    def load_csv(cls, path) -> "PairSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([int(r["src"]) for r in rows], dtype=np.int64),
                   np.array([int(r["dst"]) for r in rows], dtype=np.int64),
                   np.array([float(r["spd"]) for r in rows]))


def sample_pairs(g: Graph, n_sources: int, n_targets: int, strategy: str = "uniform", seed=0) -> PairSet:
    """Source/target pairs labelled with exact shortest-path lengths, ordered by (src, dst)."""
    if strategy not in ("uniform", "max_height_sources"):
        raise ConfigError(f"unknown pair strategy {strategy!r}")
    if not (1 <= n_sources <= g.n) or not (1 <= n_targets <= g.n - 1):
        raise ContractError(f"cannot draw {n_sources} sources x {n_targets} targets from {g.n} nodes")
    rng = seed if isinstance(seed, np.random.Generator) else substream(int(seed), "pairs", g.n)
    if strategy == "uniform":
        sources = rng.choice(g.n, n_sources, replace=False)
    else:
        if g.coords is None:
            raise ContractError("max_height_sources needs node coordinates")
        sources = np.argsort(-g.coords[:, -1], kind="stable")[:n_sources]
    dist = np.atleast_2d(dijkstra_spd(g, sources))
    src, dst, spd = [], [], []
    dropped = 0
    for row, s in enumerate(sources):
        others = np.delete(np.arange(g.n), s)
        t = np.sort(rng.choice(others, n_targets, replace=False))
        d = dist[row, t]
        ok = np.isfinite(d)
        dropped += int((~ok).sum())
        src.append(np.full(ok.sum(), s))
        dst.append(t[ok])
        spd.append(d[ok])
    if dropped:
        log.info("dropped %d disconnected pairs", dropped)
    src, dst, spd = np.concatenate(src), np.concatenate(dst), np.concatenate(spd)
    order = np.lexsort((dst, src))
    return PairSet(src[order].astype(np.int64), dst[order].astype(np.int64), spd[order])


# ---------------------------------------------------------------------------
# models


@dataclass
class TerrainNorm:
    """Affine map of 3-D coordinates into the unit cube, plus the SPD unit."""

    origin: list[float]
    extent: list[float]
    spd_scale: float

    @classmethod
    def fit(cls, grid: ElevationGrid) -> "TerrainNorm":
        xyz = grid_coords(grid)
        lo, hi = xyz.min(axis=0), xyz.max(axis=0)
        ext = np.where(hi > lo, hi - lo, 1.0)
        return cls(lo.tolist(), ext.tolist(), float(max(ext[0], ext[1])))

    def features(self, g: Graph) -> np.ndarray:
        return ((g.coords - np.asarray(self.origin)) / np.asarray(self.extent)).T


def terrain_model_config(**overrides) -> ModelConfig:
    base = dict(in_dim=3, out_dim=16, mode="sparse_gt", task="embed", layers=2, heads=2, d_model=32, d_ff=64,
                hops=2, pe_hidden=16, pe_dim=8, pe_layers=2, pe_order=3, pe_samples=16,
                pe_operator="laplacian_maxdeg", final_norm=False)
    base.update(overrides)
    return ModelConfig(**base)


def embed(model: GraphTransformer, g: Graph, norm: TerrainNorm) -> np.ndarray:
    return model.forward(g, norm.features(g)).data * norm.spd_scale


def spd_metrics(pred: np.ndarray, pairs: PairSet) -> dict[str, float]:
    err = pred - pairs.spd
    pos = pairs.spd > 0
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "relative_error": float(np.mean(np.abs(err[pos]) / pairs.spd[pos])),
    }


def evaluate_spd_model(checkpoint, g: Graph, pairs: PairSet) -> dict[str, float]:
    """Embed every node once and score l1 embedding distances against the pair labels."""
    if isinstance(checkpoint, (str, Path)):
        model, extra = load_checkpoint(checkpoint)
        norm = TerrainNorm(**extra["terrain_norm"])
    else:
        model, norm = checkpoint
    if model.cfg.task != "embed":
        raise ConfigError("SPD evaluation needs an embedding model")
    return spd_metrics(l1_distances(embed(model, g, norm), pairs.as_array()), pairs)


def euclidean_baseline(g: Graph, pairs: PairSet) -> dict[str, float]:
    return spd_metrics(np.linalg.norm(g.coords[pairs.src] - g.coords[pairs.dst], axis=1), pairs)


def train_terrain(grid: ElevationGrid, model_cfg: ModelConfig, train_cfg: TrainConfig, *, n_sources: int = 100,
                  n_targets: int = 50, strategy: str = "uniform", norm: TerrainNorm | None = None):
    """Fit an embedding model on one grid; targets are divided by the stored SPD unit."""
    g = grid_graph_8nn(grid)
    norm = norm or TerrainNorm.fit(grid)
    rng = substream(train_cfg.seed, "pairs", "train", g.n)
    tr = sample_pairs(g, n_sources, min(n_targets, g.n - 1), strategy, rng)
    va = sample_pairs(g, max(1, n_sources // 5), min(n_targets, g.n - 1), "uniform", rng)
    scale = np.array([1.0, 1.0, 1.0 / norm.spd_scale])
    data = TrainData(g, norm.features(g), train_pairs=tr.as_array() * scale, val_pairs=va.as_array() * scale)
    model, record = train_model(model_cfg, data, train_cfg)
    return model, norm, record


@dataclass
class TerrainRow:
    stride: int
    nodes: int
    mae: float
    rmse: float
    relative_error: float
    baseline_mae: float


def terrain_transfer(grid: ElevationGrid, strides: Sequence[int], model_cfg: ModelConfig, train_cfg: TrainConfig,
                     *, n_sources: int = 100, n_targets: int = 50, eval_sources: int = 100,
                     eval_targets: int = 50, checkpoint_dir=None) -> list[TerrainRow]:
    """Train at each stride and evaluate on fresh pairs of the full-resolution grid."""
    full = grid_graph_8nn(grid)
    norm = TerrainNorm.fit(grid)
    pairs = sample_pairs(full, eval_sources, eval_targets, "uniform",
                         substream(train_cfg.seed, "pairs", "eval", full.n))
    base = euclidean_baseline(full, pairs)
    rows = []
    for r in strides:
        coarse = downsample_grid(grid, r)
        model, _, _ = train_terrain(coarse, model_cfg, train_cfg, n_sources=n_sources, n_targets=n_targets,
                                    norm=norm)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"terrain_stride{r}.gttx", model,
                            {"terrain_norm": norm.__dict__, "stride": r})
        m = evaluate_spd_model((model, norm), full, pairs)
        rows.append(TerrainRow(r, coarse.nrows * coarse.ncols, m["mae"], m["rmse"], m["relative_error"], base["mae"]))
    return rows

