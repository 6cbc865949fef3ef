"""Instance-aware attention over a bag of multi-scale patch features.

Pipeline: canonical spatial ordering -> additive coordinate/scale/index
encodings -> low-rank latent attention layer(s) -> learnable-query cross
attention -> gated pooling -> classification head.

Fidelity notes, each locked by a brute-force oracle test:
* the latent attention layer with heads=1 is exactly
  MLP(LayerNorm(A_low (T' W_value))) with A_low = softmax(Q_low K_low^T / sqrt(r)),
  and has NO residual connection (a config flag adds one, default off);
* with heads > 1 every head owns its rank-r query/key projections and a
  column slice of the shared value projection; head outputs are
  concatenated and merged by a learned square projection;
* cross attention uses temperature sqrt(dim), not sqrt(rank);
* coordinates are normalized to [0, 1] by slide size before the encoding
  layer; scale codes stay raw 0/1/2.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .encoding import sinusoid_table
from .params import ParamStore, uniform_init


class RankError(Exception):
    pass


@dataclass(frozen=True)
class IaamConfig:
    dim: int = 64
    rank: int = 16
    heads: int = 1          # 1 reproduces the published equations verbatim
    layers: int = 1
    queries: int = 10
    classes: int = 4
    residual: bool = False  # optional skip around the latent-attention block

    def __post_init__(self):
        if self.rank < 1 or self.rank > self.dim:
            raise RankError(f"rank {self.rank} outside [1, dim={self.dim}]")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.queries < 1 or self.classes < 2 or self.layers < 1:
            raise ValueError("queries >= 1, classes >= 2, layers >= 1 required")


@dataclass
class Bag:
    """Ordered instance features with their coordinates and scale codes."""

    features: nc.Tensor          # (N, dim)
    coords: np.ndarray           # (N, 2) base-pixel centers (x, y)
    scale_codes: np.ndarray      # (N,) values in {0, 1, 2}
    width: int
    height: int
    label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.scale_codes = np.asarray(self.scale_codes, dtype=np.int64).reshape(-1)
        n = self.features.data.shape[0]
        if n < 1:
            raise ValueError("bag must contain at least one instance")
        if len(self.coords) != n or len(self.scale_codes) != n:
            raise ValueError("features, coords and scale_codes must align")

    @property
    def size(self) -> int:
        return self.features.data.shape[0]


def make_bag(features, coords, scale_codes, width, height, label=None) -> Bag:
    if not isinstance(features, nc.Tensor):
        features = nc.tensor(np.asarray(features, dtype=np.float64))
    return Bag(features, coords, scale_codes, width, height, label)


def order_instances(bag: Bag) -> Bag:
    """Stable sort by (x, y, scale_code), permuting all three arrays together."""
    order = np.lexsort((bag.scale_codes, bag.coords[:, 1], bag.coords[:, 0]))
    if (order == np.arange(bag.size)).all():
        return bag
    features = nc.gather_rows(bag.features, order)
    return Bag(features, bag.coords[order], bag.scale_codes[order],
               bag.width, bag.height, bag.label)


class IaamNet:
    def __init__(self, cfg: IaamConfig, store: ParamStore, rng: nc.Rng, prefix: str = "mil"):
        self.cfg = cfg
        self.prefix = prefix
        self.store = store
        d, r, q, c = cfg.dim, cfg.rank, cfg.queries, cfg.classes
        store.new(f"{prefix}.fc_pos.w", uniform_init(rng, 3, d, (3, d)))
        store.new(f"{prefix}.fc_pos.b", np.zeros((1, d)))
        for l in range(cfg.layers):
            base = f"{prefix}.mla{l}"
            for h in range(cfg.heads):
                store.new(f"{base}.head{h}.q_low", uniform_init(rng, d, r, (d, r)))
                store.new(f"{base}.head{h}.k_low", uniform_init(rng, d, r, (d, r)))
            store.new(f"{base}.value", uniform_init(rng, d, d, (d, d)))
            if cfg.heads > 1:
                store.new(f"{base}.merge", uniform_init(rng, d, d, (d, d)))
            store.new(f"{base}.ln.g", np.ones((1, d)))
            store.new(f"{base}.ln.b", np.zeros((1, d)))
            store.new(f"{base}.mlp1.w", uniform_init(rng, d, 4 * d, (d, 4 * d)))
            store.new(f"{base}.mlp1.b", np.zeros((1, 4 * d)))
            store.new(f"{base}.mlp2.w", uniform_init(rng, 4 * d, d, (4 * d, d)))
            store.new(f"{base}.mlp2.b", np.zeros((1, d)))
        store.new(f"{prefix}.dmq.queries", rng.normal(q * d).reshape(q, d) * 0.5)
        store.new(f"{prefix}.dmq.query_proj", uniform_init(rng, d, d, (d, d)))
        store.new(f"{prefix}.dmq.key_proj", uniform_init(rng, d, d, (d, d)))
        store.new(f"{prefix}.dmq.value_proj", uniform_init(rng, d, d, (d, d)))
        store.new(f"{prefix}.gate.w", uniform_init(rng, d, 1, (d, 1)))
        store.new(f"{prefix}.gate.b", np.zeros((1, 1)))
        # damped head init: the pooled feature is a sum of `queries` gated
        # rows, so full-scale init starts with confidently wrong logits
        store.new(f"{prefix}.head.w", uniform_init(rng, d, c, (d, c)) * 0.1)
        store.new(f"{prefix}.head.b", np.zeros((1, c)))

    def _p(self, name: str) -> nc.Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def parameters(self) -> list[nc.Tensor]:
        return self.store.subset(self.prefix + ".")

    # -------------------------------------------------------------- stages

    def inject_encodings(self, bag: Bag) -> nc.Tensor:
        """features + FC([x/W, y/H, scale]) + sinusoid(sequence index)."""
        pos = np.stack([
            bag.coords[:, 0] / bag.width,
            bag.coords[:, 1] / bag.height,
            bag.scale_codes.astype(np.float64),
        ], axis=1)
        fc = nc.add(nc.matmul(nc.tensor(pos), self._p("fc_pos.w")), self._p("fc_pos.b"))
        index_enc = nc.tensor(sinusoid_table(bag.size, self.cfg.dim))
        return nc.add(nc.add(bag.features, fc), index_enc)

    def mla_layer(self, x: nc.Tensor, layer: int) -> nc.Tensor:
        cfg = self.cfg
        base = f"mla{layer}"
        values = nc.matmul(x, self._p(f"{base}.value"))
        head_dim = cfg.dim // cfg.heads
        contexts = []
        for h in range(cfg.heads):
            q = nc.matmul(x, self._p(f"{base}.head{h}.q_low"))
            k = nc.matmul(x, self._p(f"{base}.head{h}.k_low"))
            attn = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(cfg.rank)))
            v = values if cfg.heads == 1 else nc.slice_cols(values, h * head_dim, (h + 1) * head_dim)
            contexts.append(nc.matmul(attn, v))
        ctx = contexts[0] if cfg.heads == 1 else nc.concat_cols(contexts)
        if cfg.heads > 1:
            ctx = nc.matmul(ctx, self._p(f"{base}.merge"))
        normed = nc.layer_norm(ctx, self._p(f"{base}.ln.g"), self._p(f"{base}.ln.b"))
        hidden = nc.silu(nc.add(nc.matmul(normed, self._p(f"{base}.mlp1.w")), self._p(f"{base}.mlp1.b")))
        out = nc.add(nc.matmul(hidden, self._p(f"{base}.mlp2.w")), self._p(f"{base}.mlp2.b"))
        return nc.add(out, x) if cfg.residual else out

    def dmq_cross_attention(self, encoded: nc.Tensor) -> nc.Tensor:
        q = nc.matmul(self._p("dmq.queries"), self._p("dmq.query_proj"))
        k = nc.matmul(encoded, self._p("dmq.key_proj"))
        v = nc.matmul(encoded, self._p("dmq.value_proj"))
        attn = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(self.cfg.dim)))
        return nc.matmul(attn, v)

    def gated_pool(self, refined: nc.Tensor) -> nc.Tensor:
        gates = nc.sigmoid(nc.add(nc.matmul(refined, self._p("gate.w")), self._p("gate.b")))
        return nc.matmul(nc.transpose(gates), refined)

    def logits(self, bag_feature: nc.Tensor) -> nc.Tensor:
        return nc.add(nc.matmul(bag_feature, self._p("head.w")), self._p("head.b"))

    def classify(self, bag_feature: nc.Tensor) -> nc.Tensor:
        return nc.softmax_rows(self.logits(bag_feature))

    # ------------------------------------------------------------- surface

    def forward_logits(self, bag: Bag) -> nc.Tensor:
        bag = order_instances(bag)
        x = self.inject_encodings(bag)
        for layer in range(self.cfg.layers):
            x = self.mla_layer(x, layer)
        refined = self.dmq_cross_attention(x)
        pooled = self.gated_pool(refined)
        return self.logits(pooled)

    def forward(self, bag: Bag) -> nc.Tensor:
        """Bag -> class probabilities (1, C)."""
        return nc.softmax_rows(self.forward_logits(bag))

    # --------------------------------------------------------- diagnostics

    def dmq_attention_weights(self, bag: Bag) -> np.ndarray:
        """(queries, N) cross-attention rows for an ordered bag; inference only."""
        bag = order_instances(bag)
        x = self.inject_encodings(bag)
        for layer in range(self.cfg.layers):
            x = self.mla_layer(x, layer)
        q = nc.matmul(self._p("dmq.queries"), self._p("dmq.query_proj"))
        k = nc.matmul(x, self._p("dmq.key_proj"))
        attn = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(self.cfg.dim)))
        return attn.data

    def gate_values(self, bag: Bag) -> np.ndarray:
        bag = order_instances(bag)
        x = self.inject_encodings(bag)
        for layer in range(self.cfg.layers):
            x = self.mla_layer(x, layer)
        refined = self.dmq_cross_attention(x)
        gates = nc.sigmoid(nc.add(nc.matmul(refined, self._p("gate.w")), self._p("gate.b")))
        return gates.data.reshape(-1)


def ordered_scale_codes(bag: Bag) -> np.ndarray:
    """Scale codes in canonical bag order (for attention diagnostics)."""
    order = np.lexsort((bag.scale_codes, bag.coords[:, 1], bag.coords[:, 0]))
    return bag.scale_codes[order]
