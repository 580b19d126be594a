"""Losses, Adam, the full-graph training loop, and the experiment harnesses."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc
from .attention import ConfigError, GraphTransformer, ModelConfig
from .graph import Graph
from .numcore import ContractError, NonFiniteError, Tensor
from .rng import substream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under column-wise class logits."""
    labels = np.asarray(labels, dtype=np.intp)
    idx = np.arange(logits.cols) if mask is None else np.asarray(mask, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("cross_entropy over an empty node set")
    y = labels[idx]
    if y.min() < 0 or y.max() >= logits.rows:
        raise ContractError(f"labels must lie in [0, {logits.rows}), got range [{y.min()}, {y.max()}]")
    picked = nc.take(nc.log_softmax(logits, axis=0), y, idx)
    return nc.scale(nc.mean_all(picked), -1.0)


def _pair_arrays(pairs, n: int):
    p = np.asarray(pairs, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise ContractError("spd_metric_loss needs at least one pair")
    i, j = p[:, 0].astype(np.intp), p[:, 1].astype(np.intp)
    bad = np.flatnonzero((i < 0) | (i >= n) | (j < 0) | (j >= n))
    if bad.size:
        k = int(bad[0])
        raise ContractError(f"pair {k} ({i[k]}, {j[k]}) is out of range for {n} nodes")
    if np.any(p[:, 2] < 0):
        raise ContractError("shortest-path targets must be non-negative")
    return i, j, p[:, 2]


def spd_metric_loss(embeddings: Tensor, pairs) -> Tensor:
    """Mean squared gap between l1 embedding distances and target path lengths."""
    i, j, d = _pair_arrays(pairs, embeddings.cols)
    diff = nc.sub(nc.gather_cols(embeddings, i), nc.gather_cols(embeddings, j))
    l1 = nc.sum_axis(nc.absolute(diff), 0)
    return nc.mean_all(nc.square(nc.sub(l1, nc.Tensor(d[None, :]))))


def l1_distances(embeddings, pairs) -> np.ndarray:
    e = np.asarray(getattr(embeddings, "data", embeddings))
    i, j, _ = _pair_arrays(pairs, e.shape[1])
    return np.abs(e[:, i] - e[:, j]).sum(axis=0)


def accuracy(logits, labels, idx=None) -> float:
    z = np.asarray(getattr(logits, "data", logits))
    idx = np.arange(z.shape[1]) if idx is None else np.asarray(idx)
    return float(np.mean(z[:, idx].argmax(axis=0) == np.asarray(labels)[idx]))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class TrainConfig:
    lr: float = 1e-2
    max_epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    patience: int = 30
    op_norm_budget: float | None = None

    def __post_init__(self):
        if not self.lr >= 0 or not np.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig,
              attention_blocks=()) -> AdamState:
    """One bias-corrected Adam update in place, then the optional Q/K/V norm clamp."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    if cfg.op_norm_budget is not None:
        for blk in attention_blocks:
            blk.clamp_operator_norms(cfg.op_norm_budget)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    """One training graph with either class labels or shortest-path pairs."""

    graph: Graph
    features: np.ndarray
    labels: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    train_pairs: np.ndarray | None = None
    val_pairs: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[1] != self.graph.n:
            raise ContractError(f"features cover {self.features.shape[1]} nodes, graph has {self.graph.n}")
        if self.labels is not None:
            if self.train_idx is None or self.val_idx is None:
                raise ContractError("classification data needs train and validation indices")
            if np.intersect1d(self.train_idx, self.val_idx).size:
                raise ContractError("train and validation splits overlap")
        elif self.train_pairs is None or self.val_pairs is None:
            raise ContractError("need labels or train/validation SPD pairs")

    @property
    def task(self) -> str:
        return "classify" if self.labels is not None else "embed"


@dataclass
class RunRecord:
    seed: int
    config: dict
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    test_metric: float | None = None
    wallclock_s: float = 0.0
    best_epoch: int = -1
    status: str = "ok"

    def __post_init__(self):
        if len(self.train_loss) != len(self.val_metric):
            raise ContractError("train_loss and val_metric lengths differ")

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def append_records(path, records: Sequence[RunRecord]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


def validation_metric(model: GraphTransformer, data: TrainData) -> float:
    out = model.forward(data.graph, data.features)
    if data.task == "classify":
        return accuracy(out, data.labels, data.val_idx)
    return float(np.mean(np.abs(l1_distances(out, data.val_pairs) - np.asarray(data.val_pairs)[:, 2])))


def train_model(model_cfg: ModelConfig, data: TrainData, cfg: TrainConfig) -> tuple[GraphTransformer, RunRecord]:
    """Full-graph training with early stopping; returns the best-validation model.

    Validation is accuracy (higher is better) for classification and the mean
    absolute SPD error (lower is better) for embeddings.
    """
    if model_cfg.task != data.task:
        raise ConfigError(f"model task {model_cfg.task!r} does not match data task {data.task!r}")
    mcfg = replace(model_cfg, seed=cfg.seed, op_norm_budget=cfg.op_norm_budget)
    model = GraphTransformer(mcfg)
    params = model.parameters()
    blocks = model.attention_blocks()
    if cfg.op_norm_budget is not None:
        for blk in blocks:
            blk.clamp_operator_norms(cfg.op_norm_budget)
    record = RunRecord(seed=cfg.seed, config={"model": mcfg.to_dict(), "train": asdict(cfg)})
    drop_rng = substream(cfg.seed, "dropout")
    sign = 1.0 if data.task == "classify" else -1.0
    state = AdamState()
    best, best_params, stale = -np.inf, None, 0
    t_start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        out = model.forward(data.graph, data.features, train=True, rng=drop_rng)
        if data.task == "classify":
            loss = cross_entropy(out, data.labels, data.train_idx)
        else:
            loss = spd_metric_loss(out, data.train_pairs)
        if not np.isfinite(loss.item()):
            record.status = "diverged"
            log.warning("seed %d: loss became non-finite at epoch %d", cfg.seed, epoch)
            break
        grads = nc.backward(loss)
        try:
            adam_step(params, {k: grads[p] for k, p in params.items() if p in grads}, state, cfg, blocks)
        except NonFiniteError as err:
            record.status = "diverged"
            log.warning("seed %d: %s at epoch %d", cfg.seed, err, epoch)
            break
        record.epoch_seconds.append(time.perf_counter() - t0)
        metric = validation_metric(model, data)
        record.train_loss.append(loss.item())
        record.val_metric.append(metric)
        if sign * metric > best:
            best, stale, record.best_epoch = sign * metric, 0, epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_params is not None:
        for k, p in params.items():
            p.data[...] = best_params[k]
    record.wallclock_s = time.perf_counter() - t_start
    return model, record


# ---------------------------------------------------------------------------
# experiment harnesses

GRID_HEADER = ["model", "alpha_train", "alpha_test", "seed", "metric", "wallclock_s"]


@dataclass
class GridResult:
    rows: list[tuple] = field(default_factory=list)
    records: dict = field(default_factory=dict)
    failures: list[tuple] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(GRID_HEADER)
            w.writerows([(m, repr(a), repr(b), s, repr(v), repr(t)) for m, a, b, s, v, t in self.rows])

    def median(self, model: str, alpha_train: float, alpha_test: float) -> float:
        vals = [r[4] for r in self.rows if r[0] == model and r[1] == alpha_train and r[2] == alpha_test]
        return float(np.median(vals)) if vals else float("nan")

    def epoch_seconds(self, model: str, alpha_train: float) -> float:
        recs = [r for (m, a, _), r in self.records.items() if m == model and a == alpha_train]
        return float(np.median([r.mean_epoch_seconds for r in recs])) if recs else float("nan")


def _check_fractions(fr):
    for a in fr:
        if not 0 < a <= 1:
            raise ContractError(f"fractions must lie in (0, 1], got {a}")


def transferability_grid(model_cfg: ModelConfig, dataset, train_fractions: Sequence[float],
                         test_fractions: Sequence[float], seeds: Sequence[int], train_cfg: TrainConfig,
                         label: str | None = None, result: GridResult | None = None) -> GridResult:
    """Train on subsampled train splits and score on subsampled test splits.

    ``dataset`` must provide ``train_data(alpha, seed)`` returning
    :class:`TrainData` and ``test_data(alpha, seed)`` returning
    ``(graph, features, labels)``.
    """
    _check_fractions(train_fractions)
    _check_fractions(test_fractions)
    name = label or model_cfg.mode
    result = result or GridResult()
    for a in train_fractions:
        for s in seeds:
            try:
                model, rec = train_model(model_cfg, dataset.train_data(a, s), replace(train_cfg, seed=s))
            except nc.GTXError as err:
                log.warning("cell %s alpha_train=%s seed=%s failed: %s", name, a, s, err)
                result.failures.append((name, a, s, str(err)))
                continue
            result.records[(name, a, s)] = rec
            for b in test_fractions:
                g, x, y = dataset.test_data(b, s)
                metric = accuracy(model.forward(g, x), y)
                result.rows.append((name, a, b, s, metric, rec.wallclock_s))
    return result


VARIANTS = {
    "no_pe": ("GT", dict(mode="dense_gt", use_pe=False, expander_degree=0)),
    "rpearl": ("GT + RPEARL", dict(mode="dense_gt", use_pe=True, expander_degree=0)),
    "mask": ("GT + Mask", dict(mode="sparse_gt", use_pe=False, expander_degree=0)),
    "mask+rpearl": ("GT + Mask + RPEARL", dict(mode="sparse_gt", use_pe=True, expander_degree=0)),
    "mask+re": ("GT + Mask + RE", dict(mode="sparse_gt", use_pe=False)),
    "mask+rpearl+re": ("GT + Mask + RPEARL + RE", dict(mode="sparse_gt", use_pe=True)),
}


def pct_vs_baseline(metric: float, baseline: float) -> str:
    return f"{(metric / baseline - 1.0) * 100:+.2f}%"


@dataclass
class AblationResult:
    variants: list[str]
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def median(self, variant: str) -> float:
        return float(np.median(self.per_seed[variant]))

    def table(self) -> list[tuple[str, float, str]]:
        """Rows ``(variant, median accuracy in percent, pct vs the first variant)``."""
        base = self.median(self.variants[0]) * 100
        out = []
        for i, v in enumerate(self.variants):
            m = self.median(v) * 100
            out.append((v, m, "--" if i == 0 else pct_vs_baseline(m, base)))
        return out

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "metric", "pct_vs_baseline"])
            w.writerows([(v, f"{m:.2f}", p) for v, m, p in self.table()])

    def render(self) -> str:
        rows = [(VARIANTS.get(v, (v,))[0], f"{m:.2f}", p) for v, m, p in self.table()]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{n:<{width}}  {m:>6}  {p:>8}" for n, m, p in rows)


def ablation_run(base_cfg: ModelConfig, variants: Sequence[str], dataset, seeds: Sequence[int],
                 train_cfg: TrainConfig, alpha: float = 0.3, expander_degree: int = 3) -> AblationResult:
    """Train each variant on the same subsampled graphs and score on the full test split."""
    if not variants:
        raise ContractError("need at least one variant")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    res = AblationResult(list(variants))
    for v in variants:
        over = dict(VARIANTS[v][1])
        over.setdefault("expander_degree", expander_degree)
        cfg = replace(base_cfg, **over)
        scores = []
        for s in seeds:
            model, _ = train_model(cfg, dataset.train_data(alpha, s), replace(train_cfg, seed=s))
            g, x, y = dataset.test_data(1.0, s)
            scores.append(accuracy(model.forward(g, x), y))
        res.per_seed[v] = scores
    return res
