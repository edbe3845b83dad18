"""Embeddings, bucket aggregation, input assembly and the causal backbone.

Input layout (interleaved mode)::

    [SEG_USER, user, SEG_HIST, hist_1 .. hist_v, SEG_RECENT, item_1, act_1, ..., item_L, act_L]

Merged mode replaces each (item, action) pair with a single token.  Each
item position predicts its own action; each action position predicts the
next item.  Batches are right-padded with PAD tokens.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .compressor import Bucket, BucketPlan
from .datalog import Interaction, ItemCatalog
from .seeding import derive_rng
from .tensor import Tensor

SEG_USER, SEG_HIST, SEG_RECENT, PAD = range(4)
NO_TARGET = -1


class Kind(IntEnum):
    SEGMENT = 0
    USER = 1
    HISTORY = 2
    ITEM = 3
    ACTION = 4
    MERGED = 5
    PAD = 6


@dataclass(frozen=True)
class ModelConfig:
    item_vocab: int
    action_vocab: int
    user_vocab: int
    category_vocab: int
    hidden_dim: int = 64
    num_layers: int = 3
    num_heads: int = 8
    ffn_expansion: int = 4
    max_recent: int = 64
    V_max: int = 8
    G_max: int = 32
    temperature: float = 0.1
    assembly_mode: str = "interleaved"
    use_align: bool = True
    use_action_head: bool = True
    use_history: bool = True
    use_item_category: bool = True
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        for name in ("item_vocab", "action_vocab", "user_vocab", "category_vocab", "num_layers",
                     "ffn_expansion", "max_recent", "V_max", "G_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.assembly_mode not in ("interleaved", "merged"):
            raise ValueError(f"unknown assembly_mode {self.assembly_mode!r}")

    @property
    def max_len(self) -> int:
        per_event = 2 if self.assembly_mode == "interleaved" else 1
        return 4 + self.V_max + per_event * self.max_recent

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenSequence:
    user_id: int
    kinds: np.ndarray
    ids: np.ndarray
    # action id of MERGED tokens, NO_TARGET elsewhere
    aux: np.ndarray
    item_targets: np.ndarray
    action_targets: np.ndarray
    plan: BucketPlan | None

    def __len__(self):
        return len(self.kinds)

    @property
    def num_history(self) -> int:
        return int((self.kinds == Kind.HISTORY).sum())


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Normal(0, 0.02) tables and weights; layer-norm gains 1 and shifts 0."""
    rng = derive_rng(cfg.seed, "model-init")
    D, dt = cfg.hidden_dim, np.dtype(cfg.dtype)

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(dt)

    shapes = {
        "E_item": (cfg.item_vocab, D),
        "E_cat": (cfg.category_vocab, D),
        "E_user": (cfg.user_vocab, D),
        "E_action": (cfg.action_vocab, D),
        "E_pos": (cfg.max_len, D),
        "E_special": (4, D),
        "W_align": (D, D),
        "b_align": (D,),
        "W_a": (cfg.action_vocab, D),
        "b_a": (cfg.action_vocab,),
    }
    F = D * cfg.ffn_expansion
    for layer in range(cfg.num_layers):
        p = f"layer{layer}."
        shapes.update({p + "Wq": (D, D), p + "bq": (D,), p + "Wk": (D, D), p + "bk": (D,),
                       p + "Wv": (D, D), p + "bv": (D,), p + "Wo": (D, D), p + "bo": (D,),
                       p + "W1": (D, F), p + "b1": (F,), p + "W2": (F, D), p + "b2": (D,)})
    params = {}
    for name in sorted(shapes):
        params[name] = Tensor(normal(*shapes[name]), requires_grad=True, name=name)
    ln_names = [f"layer{i}.ln{j}" for i in range(cfg.num_layers) for j in (1, 2)] + ["final_ln"]
    for n in ln_names:
        params[n + ".g"] = Tensor(np.ones(D, dtype=dt), requires_grad=True, name=n + ".g")
        params[n + ".b"] = Tensor(np.zeros(D, dtype=dt), requires_grad=True, name=n + ".b")
    return params


# ---------------------------------------------------------------- history tokens

def aggregate_bucket(bucket: Bucket, params: dict[str, Tensor], use_align: bool = True) -> Tensor:
    """mean over bucket items of (W_align e_i + b_align), plus the category embedding."""
    if not bucket.items:
        raise ValueError("cannot aggregate an empty bucket")
    emb = T.gather(params["E_item"], bucket.item_ids)
    if use_align:
        emb = T.matmul(emb, T.transpose(params["W_align"])) + params["b_align"]
    return T.mean(emb, axis=0) + T.gather(params["E_cat"], [bucket.category_id])[0]


def build_history_tokens(plan: BucketPlan | None, params: dict[str, Tensor],
                         use_align: bool = True) -> list[Tensor]:
    if plan is None:
        return []
    return [aggregate_bucket(b, params, use_align) for b in plan.buckets]


def _history_rows(buckets: Sequence[Bucket], params: dict[str, Tensor], use_align: bool,
                  G: int) -> Tensor:
    """Batched form of ``aggregate_bucket`` for many buckets at once -> (n, D)."""
    n = len(buckets)
    G = max(G, max(len(b.items) for b in buckets))
    ids = np.zeros((n, G), dtype=np.int64)
    w = np.zeros((n, G, 1), dtype=params["E_item"].dtype)
    for j, b in enumerate(buckets):
        k = len(b.items)
        ids[j, :k] = b.item_ids
        w[j, :k, 0] = 1.0 / k
    emb = T.gather(params["E_item"], ids)
    if use_align:
        emb = T.matmul(emb, T.transpose(params["W_align"])) + params["b_align"]
    pooled = T.sum_(T.mul(emb, Tensor(w)), axis=1)
    return pooled + T.gather(params["E_cat"], [b.category_id for b in buckets])


# ---------------------------------------------------------------- assembly

def assemble_sequence(user_id: int, plan: BucketPlan | None, recent: Sequence[Interaction],
                      catalog: ItemCatalog, cfg: ModelConfig,
                      next_item: int | None = None) -> TokenSequence:
    """Lay out one model input with its loss-target masks.

    ``next_item`` is the item following the last recent event; it becomes
    the item target of the final action (or merged) token.
    """
    if len(recent) > cfg.max_recent:
        raise ValueError(f"recent length {len(recent)} exceeds iLen={cfg.max_recent}; truncate first")
    for e in recent:
        catalog.cats(e.item_id)
    if next_item is not None:
        catalog.cats(next_item)
    kinds, ids, aux, it, at = [], [], [], [], []

    def push(kind, ident, a=NO_TARGET, item_t=NO_TARGET, act_t=NO_TARGET):
        kinds.append(kind)
        ids.append(ident)
        aux.append(a)
        it.append(item_t)
        at.append(act_t)

    push(Kind.SEGMENT, SEG_USER)
    push(Kind.USER, user_id)
    if cfg.use_history:
        push(Kind.SEGMENT, SEG_HIST)
        if plan is not None:
            if len(plan.buckets) > cfg.V_max:
                raise ValueError(f"plan has {len(plan.buckets)} buckets, V_max={cfg.V_max}")
            for j in range(len(plan.buckets)):
                push(Kind.HISTORY, j)
    push(Kind.SEGMENT, SEG_RECENT)
    nxt = [e.item_id for e in recent[1:]] + [NO_TARGET if next_item is None else next_item]
    for e, target in zip(recent, nxt):
        if cfg.assembly_mode == "interleaved":
            push(Kind.ITEM, e.item_id, act_t=e.action_id)
            push(Kind.ACTION, e.action_id, item_t=target)
        else:
            push(Kind.MERGED, e.item_id, a=e.action_id, item_t=target)
    as_arr = lambda xs, dt=np.int64: np.asarray(xs, dtype=dt)
    return TokenSequence(user_id, as_arr(kinds, np.int8), as_arr(ids), as_arr(aux), as_arr(it), as_arr(at),
                         plan if cfg.use_history else None)


def assembly_length(v: int, recent_len: int, cfg: ModelConfig) -> int:
    per_event = 2 if cfg.assembly_mode == "interleaved" else 1
    hist = 1 + v if cfg.use_history else 0
    return 3 + hist + per_event * recent_len


# ---------------------------------------------------------------- model

@dataclass
class Batch:
    seqs: list[TokenSequence]
    length: int
    valid: np.ndarray  # (B, L) bool

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence], pad_to: int | None = None) -> "Batch":
        L = max(len(s) for s in seqs)
        if pad_to is not None:
            if pad_to < L:
                raise ValueError(f"pad_to={pad_to} shorter than longest sequence {L}")
            L = pad_to
        valid = np.zeros((len(seqs), L), dtype=bool)
        for b, s in enumerate(seqs):
            valid[b, :len(s)] = True
        return cls(list(seqs), L, valid)

    def padded(self, field: str, fill: int = NO_TARGET) -> np.ndarray:
        out = np.full((len(self.seqs), self.length), fill, dtype=np.int64)
        for b, s in enumerate(self.seqs):
            out[b, :len(s)] = getattr(s, field)
        return out


class CauseModel:
    """Parameters plus the forward pass; heads live in ``training``/``evalmetrics``."""

    def __init__(self, cfg: ModelConfig, catalog: ItemCatalog | None = None,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        dt = np.dtype(cfg.dtype)
        if catalog is not None and cfg.use_item_category:
            if catalog.num_items > cfg.item_vocab or catalog.num_categories > cfg.category_vocab:
                raise ValueError("catalog larger than the model vocabularies")
            m = np.zeros((cfg.item_vocab, cfg.category_vocab), dtype=dt)
            cm = catalog.membership_matrix()
            m[:cm.shape[0], :cm.shape[1]] = cm
            self.membership = m
        else:
            self.membership = None

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def item_table(self) -> Tensor:
        """Item-token input embeddings: item row plus mean of its category rows."""
        E = self.params["E_item"]
        if self.membership is None:
            return E
        return E + T.matmul(Tensor(self.membership), self.params["E_cat"])

    def embed(self, batch: Batch) -> Tensor:
        cfg, p = self.cfg, self.params
        B, L = len(batch.seqs), batch.length
        D = cfg.hidden_dim
        kinds = batch.padded("kinds", fill=Kind.PAD)
        ids = batch.padded("ids", fill=PAD)
        aux = batch.padded("aux")
        for kind, vocab in ((Kind.USER, cfg.user_vocab), (Kind.ITEM, cfg.item_vocab),
                            (Kind.MERGED, cfg.item_vocab), (Kind.ACTION, cfg.action_vocab)):
            sel = ids[kinds == kind]
            if sel.size and (sel.min() < 0 or sel.max() >= vocab):
                raise IndexError(f"{kind.name} token id out of vocabulary [0, {vocab})")
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds positional table {cfg.max_len}")

        buckets, hist_offset = [], np.zeros(B, dtype=np.int64)
        for b, s in enumerate(batch.seqs):
            hist_offset[b] = len(buckets)
            if s.plan is not None:
                buckets.extend(s.plan.buckets)

        parts = [p["E_special"], p["E_user"], self.item_table(), p["E_action"]]
        offs = np.cumsum([0] + [t.shape[0] for t in parts])
        zero_row = offs[-1]
        parts.append(Tensor(np.zeros((1, D), dtype=p["E_item"].dtype)))
        hist_base = zero_row + 1
        if buckets:
            parts.append(_history_rows(buckets, p, cfg.use_align, cfg.G_max))
        table = T.concat(parts, axis=0)

        primary = np.full((B, L), SEG_USER, dtype=np.int64)
        secondary = np.full((B, L), zero_row, dtype=np.int64)
        primary[kinds == Kind.SEGMENT] = offs[0] + ids[kinds == Kind.SEGMENT]
        primary[kinds == Kind.PAD] = offs[0] + PAD
        primary[kinds == Kind.USER] = offs[1] + ids[kinds == Kind.USER]
        item_like = (kinds == Kind.ITEM) | (kinds == Kind.MERGED)
        primary[item_like] = offs[2] + ids[item_like]
        primary[kinds == Kind.ACTION] = offs[3] + ids[kinds == Kind.ACTION]
        merged = kinds == Kind.MERGED
        secondary[merged] = offs[3] + aux[merged]
        hist = kinds == Kind.HISTORY
        if hist.any():
            rows = np.broadcast_to(hist_offset[:, None], (B, L))[hist] + ids[hist]
            primary[hist] = hist_base + rows

        x = T.gather(table, primary)
        if merged.any():
            x = x + T.gather(table, secondary)
        pos = T.reshape(T.gather(p["E_pos"], np.arange(L)), (1, L, D))
        return x + pos

    def forward(self, batch: Batch | Sequence[TokenSequence]) -> Tensor:
        """Contextual embeddings e'_t, shape (B, L, D)."""
        if not isinstance(batch, Batch):
            batch = Batch.from_sequences(batch)
        cfg, p = self.cfg, self.params
        B, L, D = len(batch.seqs), batch.length, cfg.hidden_dim
        nh = cfg.num_heads
        dh = D // nh
        mask = T.causal_mask(L, batch.valid)
        x = self.embed(batch)
        for layer in range(cfg.num_layers):
            pre = f"layer{layer}."
            h = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def heads(w, bias):
                y = T.matmul(h, p[pre + w]) + p[pre + bias]
                return T.transpose(T.reshape(y, (B, L, nh, dh)), (0, 2, 1, 3))

            att = T.scaled_dot_attention(heads("Wq", "bq"), heads("Wk", "bk"), heads("Wv", "bv"), mask)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, L, D))
            x = x + (T.matmul(att, p[pre + "Wo"]) + p[pre + "bo"])
            h = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f = T.gelu(T.matmul(h, p[pre + "W1"]) + p[pre + "b1"])
            x = x + (T.matmul(f, p[pre + "W2"]) + p[pre + "b2"])
        return T.layer_norm(x, p["final_ln.g"], p["final_ln.b"])

    __call__ = forward

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"state dict key mismatch: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def save(self, directory: str | Path, extra: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        T.save_tensors(directory / "params", self.state_dict())
        payload = {"model_config": self.cfg.to_dict()}
        payload.update(extra or {})
        (directory / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path, catalog: ItemCatalog | None = None) -> "CauseModel":
        directory = Path(directory)
        payload = json.loads((directory / "config.json").read_text())
        model = cls(ModelConfig.from_dict(payload["model_config"]), catalog)
        model.load_state_dict(T.load_tensors(directory / "params"))
        return model


def score_items(e: Tensor, candidate_ids, params: dict[str, Tensor], tau: float) -> Tensor:
    """logit_c = <e, E_item[c]> / tau for each candidate (tied output table)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    e = T.as_tensor(e)
    cands = T.gather(params["E_item"], np.asarray(candidate_ids, dtype=np.int64))
    return T.scale(T.reshape(T.matmul(cands, T.reshape(e, (-1, 1))), (-1,)), 1.0 / tau)


def num_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(math.prod(t.shape) for t in params.values()))
