"""Dense and k-hop sparse graph-transformer layers and the full node-level model.

Node features are stored column-wise: a ``d x N`` tensor holds one feature
vector per node.  Attention weights are normalised over the attended-to nodes,
so row ``i`` of the weight matrix is the distribution node ``i`` attends with.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .graph import EdgeSet, Graph, KHopMask, k_hop_mask, random_expander_edges
from .numcore import ContractError, GTXError, Tensor
from .pe import FilterBank, PEConfig, graph_conv, rpearl, shift_operator
from .rng import substream

MODES = ("dense_gt", "sparse_gt", "gnn_baseline", "mlp_baseline")
MAGIC = b"GTTX1"


class ConfigError(GTXError, ValueError):
    pass


class CheckpointError(GTXError, ValueError):
    pass


@dataclass
class AttentionParams:
    """Weights of one transformer layer: per-head projections, output map, feedforward."""

    q: list[Tensor]
    k: list[Tensor]
    v: list[Tensor]
    out: Tensor
    ff1: Tensor | None = None
    ff1_b: Tensor | None = None
    ff2: Tensor | None = None
    ff2_b: Tensor | None = None
    ln1_g: Tensor | None = None
    ln1_b: Tensor | None = None
    ln2_g: Tensor | None = None
    ln2_b: Tensor | None = None
    ff_kind: str = "relu"
    unscaled_scores: bool = False
    op_norm_budget: float | None = None

    def __post_init__(self):
        if not (len(self.q) == len(self.k) == len(self.v)) or not self.q:
            raise ContractError("need the same positive number of Q, K and V heads")
        if len({t.shape for t in (*self.q, *self.k)}) != 1:
            raise ContractError("all query/key heads must share d_head x d_model")

    @property
    def heads(self) -> int:
        return len(self.q)

    @property
    def d_head(self) -> int:
        return self.q[0].rows

    @property
    def d_model(self) -> int:
        return self.q[0].cols

    @property
    def score_scale(self) -> float:
        return 1.0 if self.unscaled_scores else 1.0 / np.sqrt(self.d_head)

    @classmethod
    def random(cls, d_model: int, heads: int, d_head: int, d_ff: int | None, rng, *,
               gain: float = 1.0, unscaled_scores: bool = False, op_norm_budget=None, ff_kind="relu"):
        std = gain / np.sqrt(d_model)

        def w(r, c, s=std):
            return nc.parameter(rng.normal(0.0, s, (r, c)))

        p = cls(
            q=[w(d_head, d_model) for _ in range(heads)],
            k=[w(d_head, d_model) for _ in range(heads)],
            v=[w(d_head, d_model) for _ in range(heads)],
            out=w(d_model, heads * d_head, gain / np.sqrt(heads * d_head)),
            ff_kind=ff_kind,
            unscaled_scores=unscaled_scores,
            op_norm_budget=op_norm_budget,
        )
        if d_ff:
            p.ff1 = w(d_ff, d_model)
            p.ff1_b = nc.parameter(np.zeros((d_ff, 1)))
            p.ff2 = w(d_model, d_ff, gain / np.sqrt(d_ff))
            p.ff2_b = nc.parameter(np.zeros((d_model, 1)))
            p.ln1_g, p.ln2_g = nc.parameter(np.ones((d_model, 1))), nc.parameter(np.ones((d_model, 1)))
            p.ln1_b, p.ln2_b = nc.parameter(np.zeros((d_model, 1))), nc.parameter(np.zeros((d_model, 1)))
        return p

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for h in range(self.heads):
            out += [(f"{prefix}q{h}", self.q[h]), (f"{prefix}k{h}", self.k[h]), (f"{prefix}v{h}", self.v[h])]
        out.append((f"{prefix}out", self.out))
        for name in ("ff1", "ff1_b", "ff2", "ff2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            t = getattr(self, name)
            if t is not None:
                out.append((prefix + name, t))
        return out

    def clamp_operator_norms(self, budget: float | None = None) -> None:
        """Rescale every Q, K, V head whose spectral norm exceeds the budget."""
        c = self.op_norm_budget if budget is None else budget
        if c is None:
            return
        for t in (*self.q, *self.k, *self.v):
            s = np.linalg.norm(t.data, 2)
            if s > c:
                t.data *= c / s

    def operator_norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(t.data, 2)) for name, t in self.named_parameters()
                if name[:1] in "qkv" and name[1:].isdigit()}


# ---------------------------------------------------------------------------
# attention kernels


def dense_attention(params: AttentionParams, x: Tensor, *, mask=None, drop_rate: float = 0.0,
                    rng=None, hook: Callable | None = None) -> Tensor:
    """Multi-head softmax attention over all node pairs (optionally masked densely)."""
    x = nc.as_tensor(x)
    if x.rows != params.d_model:
        raise ContractError(f"features have {x.rows} rows, layer expects d_model={params.d_model}")
    heads = []
    for wq, wk, wv in zip(params.q, params.k, params.v):
        qx, kx, vx = nc.matmul(wq, x), nc.matmul(wk, x), nc.matmul(wv, x)
        scores = nc.scale(nc.matmul(nc.transpose(qx), kx), params.score_scale)
        att = nc.masked_row_softmax(scores, mask)
        if hook is not None:
            hook(att.data)
        att = nc.dropout(att, drop_rate, rng)
        heads.append(nc.matmul(vx, nc.transpose(att)))
    return nc.matmul(params.out, nc.concat_rows(heads))


def sparse_attention(params: AttentionParams, x: Tensor, mask: KHopMask, *, drop_rate: float = 0.0,
                     rng=None, hook: Callable | None = None) -> Tensor:
    """Multi-head attention where node ``i`` only attends to ``mask.rows[i]``."""
    x = nc.as_tensor(x)
    if x.rows != params.d_model:
        raise ContractError(f"features have {x.rows} rows, layer expects d_model={params.d_model}")
    if mask.n != x.cols:
        raise ContractError(f"mask covers {mask.n} nodes, features have {x.cols}")
    heads = []
    for wq, wk, wv in zip(params.q, params.k, params.v):
        heads.append(nc.edge_attention(
            nc.matmul(wq, x), nc.matmul(wk, x), nc.matmul(wv, x),
            mask.indptr, mask.indices, params.score_scale,
            drop_rate=drop_rate, rng=rng, hook=hook,
        ))
    return nc.matmul(params.out, nc.concat_rows(heads))


def _feedforward(p: AttentionParams, x: Tensor, drop_rate: float, rng) -> Tensor:
    hid = nc.pointwise_nonlinearity(nc.add(nc.matmul(p.ff1, x), p.ff1_b), p.ff_kind)
    hid = nc.dropout(hid, drop_rate, rng)
    return nc.add(nc.matmul(p.ff2, hid), p.ff2_b)


def gt_layer(params: AttentionParams, x: Tensor, mode: str = "dense_gt", mask: KHopMask | None = None, *,
             drop_rate: float = 0.0, attn_drop_rate: float = 0.0, rng=None, hook=None) -> Tensor:
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``+ FFN(LN(.))``."""
    if params.ff1 is None:
        raise ContractError("gt_layer needs feedforward and layer-norm weights")
    z = nc.layer_norm(x, params.ln1_g, params.ln1_b)
    if mode == "sparse_gt":
        if mask is None:
            raise ConfigError("sparse_gt needs a k-hop mask")
        a = sparse_attention(params, z, mask, drop_rate=attn_drop_rate, rng=rng, hook=hook)
    elif mode == "dense_gt":
        a = dense_attention(params, z, drop_rate=attn_drop_rate, rng=rng, hook=hook)
    else:
        raise ConfigError(f"gt_layer does not handle mode {mode!r}")
    h = nc.add(x, nc.dropout(a, drop_rate, rng))
    f = _feedforward(params, nc.layer_norm(h, params.ln2_g, params.ln2_b), drop_rate, rng)
    return nc.add(h, nc.dropout(f, drop_rate, rng))


# ---------------------------------------------------------------------------
# whole model


@dataclass
class ModelConfig:
    """Architecture of a node-level model; every field round-trips through checkpoints."""

    in_dim: int
    out_dim: int
    mode: str = "sparse_gt"
    task: str = "classify"
    layers: int = 2
    heads: int = 4
    d_model: int = 32
    d_head: int = 0
    d_ff: int = 64
    hops: int = 2
    dropout: float = 0.0
    attn_dropout: float = 0.0
    use_pe: bool = True
    pe_hidden: int = 16
    pe_dim: int = 16
    pe_layers: int = 2
    pe_order: int = 3
    pe_samples: int = 16
    pe_kind: str = "relu"
    pe_operator: str = "laplacian"
    expander_degree: int = 0
    gnn_order: int = 3
    final_norm: bool = True
    unscaled_scores: bool = False
    op_norm_budget: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in ("classify", "embed"):
            raise ConfigError(f"task must be classify or embed, got {self.task!r}")
        if self.mode == "sparse_gt" and self.hops < 1:
            raise ConfigError("sparse_gt needs hops >= 1")
        if self.mode == "mlp_baseline" and self.use_pe:
            raise ConfigError("mlp_baseline never looks at the graph; set use_pe = false")
        if not self.d_head:
            if self.d_model % self.heads:
                raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
            self.d_head = self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class GraphTransformer:
    """Positional encoder + stacked layers + task head for any of the four modes."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = substream(cfg.seed, "init")
        d = cfg.d_model
        self.w_in = nc.parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.in_dim), (d, cfg.in_dim)))
        self.b_in = nc.parameter(np.zeros((d, 1)))
        self.pe: PEConfig | None = None
        self.w_pe = None
        if cfg.use_pe:
            self.pe = PEConfig.random(cfg.pe_hidden, cfg.pe_dim, cfg.pe_layers, cfg.pe_order, rng,
                                      samples=cfg.pe_samples, seed=cfg.seed, kind=cfg.pe_kind,
                                      operator=cfg.pe_operator)
            self.w_pe = nc.parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.pe_dim), (d, cfg.pe_dim)))
        self.blocks: list = []
        for _ in range(cfg.layers):
            if cfg.mode in ("dense_gt", "sparse_gt"):
                self.blocks.append(AttentionParams.random(
                    d, cfg.heads, cfg.d_head, cfg.d_ff, rng,
                    unscaled_scores=cfg.unscaled_scores, op_norm_budget=cfg.op_norm_budget))
            elif cfg.mode == "gnn_baseline":
                self.blocks.append(FilterBank.random(d, d, cfg.gnn_order, rng))
            else:
                self.blocks.append((nc.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))),
                                    nc.parameter(np.zeros((d, 1)))))
        self.norm_g = nc.parameter(np.ones((d, 1)))
        self.norm_b = nc.parameter(np.zeros((d, 1)))
        # l1 distances grow with out_dim, so embedding heads start small
        out_std = 1.0 / np.sqrt(d) / (cfg.out_dim if cfg.task == "embed" else 1)
        self.w_out = nc.parameter(rng.normal(0.0, out_std, (cfg.out_dim, d)))
        self.b_out = nc.parameter(np.zeros((cfg.out_dim, 1)))
        self._masks: dict[int, tuple[Graph, KHopMask]] = {}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("w_in", self.w_in), ("b_in", self.b_in)]
        if self.pe is not None:
            for li, (bank, _) in enumerate(self.pe.layers):
                out += [(f"pe{li}.h{k}", c) for k, c in enumerate(bank.coefficients)]
            out.append(("w_pe", self.w_pe))
        for li, blk in enumerate(self.blocks):
            if isinstance(blk, AttentionParams):
                out += blk.named_parameters(f"layer{li}.")
            elif isinstance(blk, FilterBank):
                out += [(f"layer{li}.h{k}", c) for k, c in enumerate(blk.coefficients)]
            else:
                out += [(f"layer{li}.w", blk[0]), (f"layer{li}.b", blk[1])]
        out += [("norm_g", self.norm_g), ("norm_b", self.norm_b), ("w_out", self.w_out), ("b_out", self.b_out)]
        return out

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def attention_blocks(self) -> list[AttentionParams]:
        return [b for b in self.blocks if isinstance(b, AttentionParams)]

    def expander_for(self, g: Graph) -> EdgeSet | None:
        if not self.cfg.expander_degree:
            return None
        deg = self.cfg.expander_degree
        if (g.n * deg) % 2 or deg >= g.n:
            deg = max(d for d in range(min(deg, g.n - 1), -1, -1) if (g.n * d) % 2 == 0)
        return random_expander_edges(g.n, deg, substream(self.cfg.seed, "expander", g.n))

    def mask_for(self, g: Graph, extra_edges: EdgeSet | None = None) -> KHopMask:
        key = id(g) if extra_edges is None else (id(g), id(extra_edges))
        hit = self._masks.get(key)
        if hit is not None and hit[0] is g:
            return hit[1]
        if extra_edges is None:
            extra_edges = self.expander_for(g)
        mask = k_hop_mask(g, self.cfg.hops, extra_edges)
        self._masks[key] = (g, mask)
        return mask

    def encode_positions(self, g: Graph, pe_ids=None) -> Tensor:
        return nc.matmul(self.w_pe, nc.transpose(rpearl(self.pe, g, pe_ids)))

    def forward(self, g: Graph, features, *, train: bool = False, rng=None, pe_ids=None,
                extra_edges: EdgeSet | None = None, mask: KHopMask | None = None, hook=None) -> Tensor:
        cfg = self.cfg
        x = nc.as_tensor(features)
        if x.rows != cfg.in_dim:
            raise ContractError(f"features have {x.rows} rows, model expects in_dim={cfg.in_dim}")
        if cfg.mode != "mlp_baseline" and x.cols != g.n:
            raise ContractError(f"features cover {x.cols} nodes, graph has {g.n}")
        drop_rng = rng if train else None
        h = nc.add(nc.matmul(self.w_in, x), self.b_in)
        if self.pe is not None:
            h = nc.add(h, self.encode_positions(g, pe_ids))
        if cfg.mode == "sparse_gt" and mask is None:
            mask = self.mask_for(g, extra_edges)
        shift = shift_operator(g, cfg.pe_operator) if cfg.mode == "gnn_baseline" else None
        for blk in self.blocks:
            if cfg.mode in ("dense_gt", "sparse_gt"):
                h = gt_layer(blk, h, cfg.mode, mask, drop_rate=cfg.dropout, attn_drop_rate=cfg.attn_dropout,
                             rng=drop_rng, hook=hook)
            elif cfg.mode == "gnn_baseline":
                h = nc.add(h, nc.dropout(nc.relu(graph_conv(blk, shift, h)), cfg.dropout, drop_rng))
            else:
                h = nc.add(h, nc.dropout(nc.relu(nc.add(nc.matmul(blk[0], h), blk[1])), cfg.dropout, drop_rng))
        if cfg.final_norm:
            h = nc.layer_norm(h, self.norm_g, self.norm_b)
        return nc.add(nc.matmul(self.w_out, h), self.b_out)

    __call__ = forward


def model_forward(model: GraphTransformer, g: Graph, features, **kw) -> Tensor:
    return model.forward(g, features, **kw)


# ---------------------------------------------------------------------------
# checkpoints: MAGIC, u64 manifest length, JSON manifest, float64 LE arrays


def save_checkpoint(path, model: GraphTransformer, extra: dict | None = None) -> None:
    named = model.named_parameters()
    manifest = {
        "config": model.cfg.to_dict(),
        "params": [[name, t.rows, t.cols] for name, t in named],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[GraphTransformer, dict]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}")
    (length,) = struct.unpack("<Q", raw[5:13])
    manifest = json.loads(raw[13:13 + length].decode())
    model = GraphTransformer(ModelConfig.from_dict(manifest["config"]))
    named = dict(model.named_parameters())
    offset = 13 + length
    for name, rows, cols in manifest["params"]:
        t = named.get(name)
        if t is None or t.shape != (rows, cols):
            raise CheckpointError(f"{path}: parameter {name} ({rows}x{cols}) does not match the config")
        nbytes = rows * cols * 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        t.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(rows, cols)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, manifest["extra"]


def attention_weights_dense(att) -> np.ndarray:
    """Hook payloads come as dense arrays or CSR matrices; densify either."""
    return att.toarray() if sp.issparse(att) else np.asarray(att)
