"""Analytic manifolds, their Laplace spectra, and Monte-Carlo limit references.

Three manifolds are supported, all with the uniform probability measure:

* ``circle``: unit circle in R^2, eigenvalues ``k^2``.
* ``flat_torus_2d``: product of two unit circles embedded in R^4, eigenvalues ``|k|^2``.
* ``sphere_2d``: unit sphere in R^3, eigenvalues ``l(l+1)``.

Eigenfunctions are normalised so that ``E_mu[phi_i phi_j] = delta_ij``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.spatial import cKDTree
from scipy.special import sph_harm_y

from . import numcore as nc
from .attention import AttentionParams, ConfigError, dense_attention, sparse_attention
from .graph import Graph, build_kernel_graph, k_hop_mask, kernel_bandwidth, radius_graph
from .numcore import ContractError, EmptyNeighborhoodError, Tensor
from .pe import FilterBank, gnn_forward
from .rng import substream

KINDS = {"circle": (1, 2), "flat_torus_2d": (2, 4), "sphere_2d": (2, 3)}
TASKS = ("gt_vs_mt", "sparse_gt_vs_restricted_mt", "gnn_vs_mnn")


@dataclass(frozen=True)
class ManifoldSpec:
    kind: str
    density: str = "uniform"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unsupported manifold {self.kind!r}; choose from {sorted(KINDS)}")
        if self.density != "uniform":
            raise ConfigError(f"only uniform density is supported, got {self.density!r}")

    @property
    def d(self) -> int:
        return KINDS[self.kind][0]

    @property
    def ambient_dim(self) -> int:
        return KINDS[self.kind][1]


def constraint_residual(spec: ManifoldSpec, points: np.ndarray) -> np.ndarray:
    """Per-point distance from the defining equations of the manifold."""
    p = np.asarray(points, dtype=np.float64)
    if spec.kind == "flat_torus_2d":
        return np.maximum(np.abs(np.hypot(p[:, 0], p[:, 1]) - 1), np.abs(np.hypot(p[:, 2], p[:, 3]) - 1))
    return np.abs(np.linalg.norm(p, axis=1) - 1)


@dataclass
class PointCloud:
    spec: ManifoldSpec
    points: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != self.spec.ambient_dim:
            raise ContractError(f"{self.spec.kind} points must be N x {self.spec.ambient_dim}, got {self.points.shape}")
        res = constraint_residual(self.spec, self.points)
        if res.size and res.max() > 1e-12:
            i = int(np.argmax(res))
            raise ContractError(f"point {i} is off the {self.spec.kind} by {res[i]:.3e}")

    def __len__(self):
        return self.points.shape[0]


def sample_manifold(spec: ManifoldSpec, n: int, seed) -> PointCloud:
    """``n`` i.i.d. uniform samples, reproducible per seed."""
    if n < 2:
        raise ContractError(f"need n >= 2 samples, got {n}")
    rng = substream(int(seed), "sampling", n)
    if spec.kind == "circle":
        t = rng.uniform(0.0, 2 * np.pi, n)
        pts = np.column_stack([np.cos(t), np.sin(t)])
    elif spec.kind == "flat_torus_2d":
        a, b = rng.uniform(0.0, 2 * np.pi, (2, n))
        pts = np.column_stack([np.cos(a), np.sin(a), np.cos(b), np.sin(b)])
    else:
        g = rng.standard_normal((n, 3))
        pts = g / np.linalg.norm(g, axis=1, keepdims=True)
    return PointCloud(spec, pts, int(seed))


def equispaced_cloud(spec: ManifoldSpec, n: int) -> PointCloud:
    """Deterministic grid quadrature (circle: ``n`` angles; torus: ``n`` per axis)."""
    if spec.kind == "circle":
        t = 2 * np.pi * np.arange(n) / n
        return PointCloud(spec, np.column_stack([np.cos(t), np.sin(t)]))
    if spec.kind == "flat_torus_2d":
        a, b = np.meshgrid(2 * np.pi * np.arange(n) / n, 2 * np.pi * np.arange(n) / n, indexing="ij")
        a, b = a.ravel(), b.ravel()
        return PointCloud(spec, np.column_stack([np.cos(a), np.sin(a), np.cos(b), np.sin(b)]))
    raise ConfigError("no equispaced grid for the sphere; use sample_manifold")


# ---------------------------------------------------------------------------
# spectra


@dataclass
class SpectralBasis:
    """First ``len(eigenvalues)`` Laplace eigenpairs; the count is the bandlimit."""

    spec: ManifoldSpec
    eigenvalues: np.ndarray
    evaluator: Callable[[np.ndarray], np.ndarray]

    @property
    def band(self) -> int:
        return len(self.eigenvalues)

    def evaluate(self, points) -> np.ndarray:
        """``(n_points, band)`` matrix of eigenfunction values."""
        pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
        return self.evaluator(pts)

    def phi(self, index: int, points) -> np.ndarray:
        return self.evaluate(points)[:, index]

    def first_nonzero_multiplicity(self) -> int:
        lam = self.eigenvalues
        return int(np.sum(np.isclose(lam, lam[1])))


def _circle_basis(count: int):
    modes = [(0, "c")] + [(k, s) for k in range(1, count // 2 + 1) for s in ("c", "s")]
    modes = modes[:count]
    lam = np.array([k * k for k, _ in modes], dtype=np.float64)

    def ev(pts):
        t = np.arctan2(pts[:, 1], pts[:, 0])
        cols = [np.ones_like(t) if k == 0 else np.sqrt(2) * (np.cos(k * t) if s == "c" else np.sin(k * t))
                for k, s in modes]
        return np.column_stack(cols)

    return lam, ev


def _torus_basis(count: int):
    r = int(math.ceil(math.sqrt(count))) + 1
    reps = [(a, b) for a in range(0, r + 1) for b in range(-r, r + 1) if a > 0 or (a == 0 and b > 0)]
    reps.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k[0], k[1]))
    modes = [((0, 0), "c")] + [(k, s) for k in reps for s in ("c", "s")]
    modes = modes[:count]
    lam = np.array([a * a + b * b for (a, b), _ in modes], dtype=np.float64)

    def ev(pts):
        u = np.arctan2(pts[:, 1], pts[:, 0])
        v = np.arctan2(pts[:, 3], pts[:, 2])
        cols = []
        for (a, b), s in modes:
            if a == 0 and b == 0:
                cols.append(np.ones_like(u))
            else:
                ph = a * u + b * v
                cols.append(np.sqrt(2) * (np.cos(ph) if s == "c" else np.sin(ph)))
        return np.column_stack(cols)

    return lam, ev


def _sphere_basis(count: int):
    modes = []
    ell = 0
    while len(modes) < count:
        modes += [(ell, m) for m in range(-ell, ell + 1)]
        ell += 1
    modes = modes[:count]
    lam = np.array([l * (l + 1) for l, _ in modes], dtype=np.float64)

    def ev(pts):
        polar = np.arccos(np.clip(pts[:, 2], -1.0, 1.0))
        azim = np.arctan2(pts[:, 1], pts[:, 0])
        cols = []
        # area-normalised harmonics times sqrt(4 pi) are orthonormal under the probability measure
        for l, m in modes:
            y = sph_harm_y(l, abs(m), polar, azim) * np.sqrt(4 * np.pi)
            if m == 0:
                cols.append(y.real)
            elif m > 0:
                cols.append(np.sqrt(2) * (-1) ** m * y.real)
            else:
                cols.append(np.sqrt(2) * (-1) ** m * y.imag)
        return np.column_stack(cols)

    return lam, ev


def analytic_spectrum(spec: ManifoldSpec, count: int) -> SpectralBasis:
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    builder = {"circle": _circle_basis, "flat_torus_2d": _torus_basis, "sphere_2d": _sphere_basis}.get(spec.kind)
    if builder is None:
        raise ConfigError(f"no analytic spectrum for {spec.kind!r}")
    lam, ev = builder(count)
    return SpectralBasis(spec, lam, ev)


# ---------------------------------------------------------------------------
# kernel-graph spectra


def kernel_laplacian(cloud: PointCloud, scale: float = 0.25) -> tuple[Graph, np.ndarray]:
    """Kernel graph at the default bandwidth and its dense Laplacian."""
    eps = kernel_bandwidth(len(cloud), cloud.spec.d, scale)
    g = build_kernel_graph(cloud.points, eps)
    return g, g.laplacian.toarray()


def calibration_scale(graph_eigs: np.ndarray, basis: SpectralBasis) -> float:
    """Ratio of graph to manifold eigenvalues on the first nonzero eigenspace."""
    m = basis.first_nonzero_multiplicity()
    return float(np.mean(graph_eigs[1:1 + m]) / basis.eigenvalues[1])


def calibrated_spectrum(cloud: PointCloud, count: int, scale: float = 0.25) -> tuple[np.ndarray, float]:
    """Lowest ``count`` kernel-graph eigenvalues divided by the calibration scale."""
    basis = analytic_spectrum(cloud.spec, max(count, 2))
    _, lap = kernel_laplacian(cloud, scale)
    ev = sla.eigh(lap, eigvals_only=True, subset_by_index=[0, count - 1])
    s = calibration_scale(ev, basis)
    return ev / s, s


def spectral_convergence(spec: ManifoldSpec, n_grid: Sequence[int], seeds: Sequence[int],
                         indices: Sequence[int] = (1, 2, 3), scale: float = 0.25) -> list[dict]:
    """Relative eigenvalue errors per (N, seed); ``indices`` are zero-based."""
    count = max(indices) + 1
    truth = analytic_spectrum(spec, count).eigenvalues
    rows = []
    for n in n_grid:
        for s in seeds:
            ev, _ = calibrated_spectrum(sample_manifold(spec, n, s), count, scale)
            rel = np.abs(ev[list(indices)] - truth[list(indices)]) / truth[list(indices)]
            rows.append({"N": n, "seed": s, "errors": rel, "error": float(rel.mean())})
    return rows


def heat_operator(lap: np.ndarray, scale: float) -> np.ndarray:
    """Dense ``exp(-L / scale)`` for a symmetric Laplacian."""
    w, u = np.linalg.eigh(lap)
    return (u * np.exp(-w / scale)) @ u.T


# ---------------------------------------------------------------------------
# limit references


def mnn_reference(banks: Sequence[tuple[FilterBank, str]], basis: SpectralBasis, coefficients,
                  eval_points, quadrature=None) -> Tensor:
    """Manifold network evaluated through the spectrum.

    ``coefficients`` is ``in_dim x n_coef`` (``n_coef <= band``).  Each filter
    multiplies coefficient ``i`` by ``sum_k H_k exp(-k lambda_i)``.  Between
    layers the nonlinearity is applied on ``quadrature`` and projected back onto
    the basis by Monte-Carlo inner products.
    """
    c = np.atleast_2d(np.asarray(coefficients, dtype=np.float64))
    if c.shape[1] > basis.band:
        raise ContractError(f"signal has {c.shape[1]} coefficients, bandlimit is {basis.band}")
    c = np.pad(c, ((0, 0), (0, basis.band - c.shape[1])))
    ev_eval = basis.evaluate(eval_points)
    ev_quad = None
    if len(banks) > 1:
        if quadrature is None:
            raise ContractError("multi-layer references need a quadrature cloud")
        ev_quad = basis.evaluate(quadrature)
    out = None
    for li, (bank, kind) in enumerate(banks):
        if bank.in_dim != c.shape[0]:
            raise ContractError(f"layer {li} expects {bank.in_dim} channels, got {c.shape[0]}")
        resp = bank.frequency_response(basis.eigenvalues)  # band x out x in
        c = np.einsum("joi,ij->oj", resp, c)
        if li == len(banks) - 1:
            out = nc.pointwise_nonlinearity(nc.Tensor(c @ ev_eval.T), kind).data
        else:
            vals = nc.pointwise_nonlinearity(nc.Tensor(c @ ev_quad.T), kind).data
            c = vals @ ev_quad / ev_quad.shape[0]
    return nc.Tensor(out)


def mt_reference(params: AttentionParams, f_quad, quad_points, f_eval, eval_points=None,
                 radius: float | None = None, chunk: int = 512) -> Tensor:
    """Monte-Carlo manifold attention with unscaled scores.

    ``f_quad`` (d x Q) holds the signal on the quadrature cloud and ``f_eval``
    (d x E) at the evaluation points.  With ``radius`` the integrand is
    restricted to the Euclidean ball ``|x - y| <= radius`` around each
    evaluation point.
    """
    fq = np.asarray(getattr(f_quad, "data", f_quad), dtype=np.float64)
    fe = np.asarray(getattr(f_eval, "data", f_eval), dtype=np.float64)
    if not (np.all(np.isfinite(fq)) and np.all(np.isfinite(fe))):
        raise nc.NonFiniteError("manifold signal has non-finite values")
    restrict = radius is not None and np.isfinite(radius)
    if restrict:
        qp = np.asarray(getattr(quad_points, "points", quad_points), dtype=np.float64)
        ep = np.asarray(getattr(eval_points, "points", eval_points), dtype=np.float64)
        qsq = np.einsum("ij,ij->i", qp, qp)
    heads = []
    for wq, wk, wv in zip(params.q, params.k, params.v):
        kf, vf = wk.data @ fq, wv.data @ fq
        qf = wq.data @ fe
        out = np.empty((vf.shape[0], fe.shape[1]))
        for lo in range(0, fe.shape[1], chunk):
            s = qf[:, lo:lo + chunk].T @ kf
            if restrict:
                e = ep[lo:lo + chunk]
                d2 = np.einsum("ij,ij->i", e, e)[:, None] + qsq[None, :] - 2 * e @ qp.T
                inside = d2 <= radius * radius
                empty = np.flatnonzero(~inside.any(axis=1))
                if empty.size:
                    i = lo + int(empty[0])
                    raise EmptyNeighborhoodError(f"ball of radius {radius} around eval point {i} {ep[i]} "
                                                 "contains no quadrature points")
                s = np.where(inside, s, -np.inf)
            s = s - s.max(axis=1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=1, keepdims=True)
            out[:, lo:lo + chunk] = vf @ w.T
        heads.append(out)
    return nc.Tensor(params.out.data @ np.vstack(heads))


def induced_signal_distance(values_a, cloud_a, values_b, cloud_b, reference_quadrature) -> float:
    """Mean l2 gap between the piecewise-constant (Voronoi) extensions of two node signals."""
    pa = np.asarray(getattr(cloud_a, "points", cloud_a), dtype=np.float64)
    pb = np.asarray(getattr(cloud_b, "points", cloud_b), dtype=np.float64)
    q = np.asarray(getattr(reference_quadrature, "points", reference_quadrature), dtype=np.float64)
    va = np.atleast_2d(np.asarray(getattr(values_a, "data", values_a), dtype=np.float64))
    vb = np.atleast_2d(np.asarray(getattr(values_b, "data", values_b), dtype=np.float64))
    if len(pa) == 0 or len(pb) == 0:
        raise ContractError("clouds must be nonempty")
    _, ia = cKDTree(pa).query(q)
    _, ib = cKDTree(pb).query(q)
    return float(np.linalg.norm(va[:, ia] - vb[:, ib], axis=0).mean())


# ---------------------------------------------------------------------------
# convergence curves


def lipschitz_estimate(values, points, neighbors: int = 8) -> float:
    """Largest difference quotient over each point's nearest neighbours."""
    v = np.atleast_2d(values)
    pts = np.asarray(points)
    dist, idx = cKDTree(pts).query(pts, k=neighbors + 1)
    dist, idx = dist[:, 1:], idx[:, 1:]
    diff = np.linalg.norm(v[:, idx] - v[:, None, :].transpose(0, 2, 1), axis=0)
    return float(np.max(diff / np.maximum(dist, 1e-15)))


@dataclass
class ConvergenceModel:
    """Frozen positional encoder, attention layer and input signal shared across all N."""

    spec: ManifoldSpec
    pe_layers: list[tuple[FilterBank, str]]
    attention: AttentionParams
    signal: np.ndarray
    basis: SpectralBasis
    radius: float = 0.8
    bandwidth_scale: float = 0.25

    @classmethod
    def random(cls, spec: ManifoldSpec, seed: int = 0, *, modes: int = 7, pe_dim: int = 4, order: int = 3,
               d_head: int = 4, heads: int = 1, radius: float = 0.8, bandwidth_scale: float = 0.25,
               kind: str = "tanh") -> "ConvergenceModel":
        rng = substream(seed, "init")
        basis = analytic_spectrum(spec, modes)
        coef = rng.standard_normal(modes) / (1.0 + basis.eigenvalues)
        coef[0] = 0.0
        probe = sample_manifold(spec, 4096, seed + 7919)
        lip = lipschitz_estimate(coef @ basis.evaluate(probe).T, probe.points)
        bank = FilterBank([nc.parameter(rng.normal(0.0, 0.5, (pe_dim, 1))) for _ in range(order)])
        att = AttentionParams.random(pe_dim, heads, d_head, None, rng, unscaled_scores=True)
        att.out = nc.parameter(np.eye(pe_dim, heads * d_head)) if heads * d_head == pe_dim else att.out
        return cls(spec, [(bank, kind)], att, coef / lip, basis, radius, bandwidth_scale)

    def signal_at(self, points) -> np.ndarray:
        return (self.basis.evaluate(points) @ self.signal)[None, :]

    def continuous_pe(self, points, quadrature=None) -> np.ndarray:
        return mnn_reference(self.pe_layers, self.basis, self.signal[None, :], points, quadrature).data

    def discrete_pe(self, cloud: PointCloud) -> tuple[np.ndarray, Graph]:
        g, lap = kernel_laplacian(cloud, self.bandwidth_scale)
        w, u = np.linalg.eigh(lap)
        s = calibration_scale(w, self.basis)
        heat = (u * np.exp(-w / s)) @ u.T
        z = nc.Tensor(self.signal_at(cloud))
        return gnn_forward(self.pe_layers, heat, z).data, g


@dataclass
class CurveResult:
    task: str
    rows: list[tuple[str, int, int, float]] = field(default_factory=list)

    def summary(self) -> list[tuple[str, int, float, float, float]]:
        ns = sorted({r[1] for r in self.rows})
        med = [float(np.median([r[3] for r in self.rows if r[1] == n])) for n in ns]
        iqr = [float(np.subtract(*np.percentile([r[3] for r in self.rows if r[1] == n], [75, 25]))) for n in ns]
        slope = fit_slope(ns, med)
        return [(self.task, n, m, q, slope) for n, m, q in zip(ns, med, iqr)]

    def medians(self) -> dict[int, float]:
        return {row[1]: row[2] for row in self.summary()}

    def write(self, curve_csv, summary_csv=None) -> None:
        with open(curve_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "N", "seed", "error"])
            w.writerows([(t, n, s, repr(e)) for t, n, s, e in self.rows])
        if summary_csv is not None:
            with open(summary_csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["task", "N", "median", "iqr", "fit_slope"])
                w.writerows([(t, n, repr(m), repr(q), repr(s)) for t, n, m, q, s in self.summary()])


def fit_slope(ns: Sequence[int], errors: Sequence[float]) -> float:
    """Least-squares slope of ``log error`` against ``log N``; nan if any error is zero."""
    e = np.asarray(errors, dtype=np.float64)
    if len(ns) < 2 or np.any(e <= 0):
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(ns, dtype=np.float64)), np.log(e), 1)[0])


def rate_exponent(ns: Sequence[int], errors: Sequence[float]) -> float:
    """Slope of ``log error`` against ``log(log N / N)``, the natural rate variable."""
    e = np.asarray(errors, dtype=np.float64)
    x = np.log(np.log(np.asarray(ns, dtype=np.float64)) / np.asarray(ns, dtype=np.float64))
    return float(np.polyfit(x, np.log(e), 1)[0])


def convergence_cell(task: str, model: ConvergenceModel, n: int, seed: int, quad: PointCloud,
                     quad_pe: np.ndarray | None = None) -> float:
    """Mean per-node l2 gap between a discrete model on ``n`` samples and its limit."""
    if task not in TASKS:
        raise ConfigError(f"unknown convergence task {task!r}")
    cloud = sample_manifold(model.spec, n, seed)
    x, _ = model.discrete_pe(cloud)
    f = model.continuous_pe(cloud)
    if task == "gnn_vs_mnn":
        return float(np.linalg.norm(x - f, axis=0).mean())
    if quad_pe is None:
        quad_pe = model.continuous_pe(quad)
    if task == "gt_vs_mt":
        gt = dense_attention(model.attention, nc.Tensor(x)).data
        mt = mt_reference(model.attention, quad_pe, quad, f).data
    else:
        mask = k_hop_mask(radius_graph(cloud.points, model.radius), 1)
        gt = sparse_attention(model.attention, nc.Tensor(x), mask).data
        mt = mt_reference(model.attention, quad_pe, quad, f, cloud, radius=model.radius).data
    return float(np.linalg.norm(gt - mt, axis=0).mean())


def convergence_curve(task: str, model: ConvergenceModel, n_grid: Sequence[int], seeds: Sequence[int],
                      quad_size: int = 16384, quad_seed: int = 10_007, progress=None) -> CurveResult:
    if list(n_grid) != sorted(n_grid):
        raise ContractError("n_grid must be ascending")
    quad = sample_manifold(model.spec, quad_size, quad_seed)
    quad_pe = None if task == "gnn_vs_mnn" else model.continuous_pe(quad)
    result = CurveResult(task)
    for n in n_grid:
        for s in seeds:
            err = convergence_cell(task, model, n, s, quad, quad_pe)
            result.rows.append((task, n, s, err))
            if progress is not None:
                progress(task, n, s, err)
    return result
