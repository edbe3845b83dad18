"""Losses, negative sampling, Adam and the training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .compressor import compress
from .datalog import ItemCatalog, UserSequence, partition_history_recent
from .model import Batch, CauseModel, ModelConfig, TokenSequence, assemble_sequence
from .seeding import derive_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 32
    negatives: int = 200
    temperature: float = 0.1
    seed: int = 0
    patience: int = 10
    # training windows cut per user, newest first; 1 = a single example per user
    windows_per_user: int = 1

    def __post_init__(self):
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.windows_per_user < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and windows_per_user >= 1 required")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- negatives

def sample_negatives(N: int, K: int, positive_id, rng: np.random.Generator) -> np.ndarray:
    """K ids uniform over [0, N) minus the positive, drawn with replacement.

    ``positive_id`` may be an int (returns shape (K,)) or an array of
    positives (returns shape (P, K)).
    """
    if N < 2:
        raise ValueError("need at least 2 items to sample negatives")
    pos = np.asarray(positive_id, dtype=np.int64)
    draws = rng.integers(0, N - 1, size=pos.shape + (K,))
    # shift past the positive: maps [0, N-1) onto [0, N) \ {positive}
    return draws + (draws >= pos[..., None])


# ---------------------------------------------------------------- losses

def infonce_losses(e: Tensor, positive_ids, negative_ids, item_table: Tensor, tau: float) -> Tensor:
    """Per-row -log P(positive) against its sampled negatives -> shape (P,).

    ``e`` is (P, D); ``negative_ids`` is (P, K).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos = np.asarray(positive_ids, dtype=np.int64).reshape(-1)
    neg = np.asarray(negative_ids, dtype=np.int64).reshape(len(pos), -1)
    if np.any(neg == pos[:, None]):
        raise ValueError("positive item found among its negatives")
    cands = np.concatenate([pos[:, None], neg], axis=1)
    P, K1 = cands.shape
    D = e.shape[-1]
    if item_table.shape[0] <= 4 * K1:
        # small catalog: score everything once, then pick each row's candidates
        full = T.matmul(e, T.transpose(item_table))                    # (P, N)
        logits = T.slice_(full, (np.arange(P)[:, None], cands))
    else:
        emb = T.gather(item_table, cands)                               # (P, K+1, D)
        logits = T.reshape(T.matmul(emb, T.reshape(e, (P, D, 1))), (P, K1))
    logp = T.log_softmax(T.scale(logits, 1.0 / tau), axis=-1)
    return T.scale(T.reshape(logp[:, 0], (P,)), -1.0)


def infonce_loss(e: Tensor, positive_id: int, negative_ids, params: dict[str, Tensor], tau: float) -> Tensor:
    """Contrastive next-item loss for one position (scalar)."""
    e = T.reshape(T.as_tensor(e), (1, -1))
    return T.reshape(infonce_losses(e, [positive_id], [negative_ids], params["E_item"], tau), ())


def action_losses(e: Tensor, labels, params: dict[str, Tensor]) -> Tensor:
    """Per-row cross-entropy of softmax(W_a e + b_a) -> shape (P,)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_actions = params["W_a"].shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_actions):
        raise ValueError(f"action label outside [0, {n_actions})")
    logits = T.matmul(e, T.transpose(params["W_a"])) + params["b_a"]
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return T.scale(T.sum_(T.mul(logp, Tensor(onehot)), axis=-1), -1.0)


def action_loss(e: Tensor, label: int, params: dict[str, Tensor]) -> Tensor:
    e = T.reshape(T.as_tensor(e), (1, -1))
    return T.reshape(action_losses(e, [label], params), ())


@dataclass
class LossParts:
    total: Tensor
    item: Tensor
    action: Tensor | None
    n_item: int
    n_action: int


def total_loss(model: CauseModel, batch: Batch | Sequence[TokenSequence], rng: np.random.Generator,
               negatives: int, tau: float | None = None, neg_ids: np.ndarray | None = None) -> LossParts:
    """Mean item loss over item-target positions plus mean action loss.

    The action term is dropped when the model's action head is disabled or
    the batch has no action targets (merged mode).
    """
    if not isinstance(batch, Batch):
        batch = Batch.from_sequences(batch)
    cfg = model.cfg
    tau = cfg.temperature if tau is None else tau
    out = model.forward(batch)
    B, L, D = out.shape
    flat = T.reshape(out, (B * L, D))
    item_t = batch.padded("item_targets").reshape(-1)
    item_pos = np.flatnonzero(item_t >= 0)
    if item_pos.size == 0:
        raise ValueError("batch has no item targets")
    pos_ids = item_t[item_pos]
    if neg_ids is None:
        neg_ids = sample_negatives(cfg.item_vocab, negatives, pos_ids, rng)
    item_term = T.mean(infonce_losses(T.gather(flat, item_pos), pos_ids, neg_ids,
                                      model.params["E_item"], tau))
    total, action_term, n_act = item_term, None, 0
    if cfg.use_action_head:
        act_t = batch.padded("action_targets").reshape(-1)
        act_pos = np.flatnonzero(act_t >= 0)
        if act_pos.size:
            action_term = T.mean(action_losses(T.gather(flat, act_pos), act_t[act_pos], model.params))
            total = item_term + action_term
            n_act = int(act_pos.size)
    return LossParts(total, item_term, action_term, int(item_pos.size), n_act)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, in place on ``params``; parameters without a gradient are skipped."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- examples

def make_examples(seqs: Sequence[UserSequence], catalog: ItemCatalog, cfg: ModelConfig,
                  windows_per_user: int = 1) -> list[TokenSequence]:
    """Training inputs: each window's final event is the held-out next item.

    Windows are cut newest first; each uses the ``iLen`` events before its
    target as the recent part and everything older as history.
    """
    out = []
    for seq in seqs:
        events = list(seq.events)
        end = len(events)
        for _ in range(windows_per_user):
            if end < 2:
                break
            context, target = events[:end - 1], events[end - 1]
            out.append(context_sequence(seq.user_id, context, catalog, cfg, next_item=target.item_id))
            end -= cfg.max_recent
    return out


def context_sequence(user_id: int, context, catalog: ItemCatalog, cfg: ModelConfig,
                     next_item: int | None = None) -> TokenSequence:
    history, recent = partition_history_recent(context, cfg.max_recent)
    plan = compress(history, catalog, cfg.V_max, cfg.G_max) if cfg.use_history else None
    return assemble_sequence(user_id, plan, recent, catalog, cfg, next_item=next_item)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: CauseModel
    log: list[dict]
    best_epoch: int
    best_val: float


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_seqs: Sequence[UserSequence],
          catalog: ItemCatalog, val_seqs: Sequence[UserSequence] | None = None,
          log_path: str | Path | None = None, eval_fn=None) -> TrainResult:
    """Train from scratch; keeps the parameters of the best validation epoch.

    ``val_seqs`` holds the held-out next event per user (aligned with
    ``train_seqs`` by user id).  Without validation data the final epoch
    is kept.
    """
    from .evalmetrics import evaluate

    model = CauseModel(model_cfg, catalog)
    examples = make_examples(train_seqs, catalog, model_cfg, train_cfg.windows_per_user)
    if not examples:
        raise ValueError("empty training split")
    rng = derive_rng(train_cfg.seed, "train-shuffle")
    neg_rng = derive_rng(train_cfg.seed, "train-negatives")
    state = AdamState()
    history: list[dict] = []
    best_val, best_epoch, best_state, stale = -1.0, 0, model.state_dict(), 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(examples))
            losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                chunk = [examples[i] for i in order[start:start + train_cfg.batch_size]]
                parts = total_loss(model, chunk, neg_rng, train_cfg.negatives, train_cfg.temperature)
                for p in model.params.values():
                    p.grad = None
                T.backward(parts.total)
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state,
                          train_cfg.learning_rate, train_cfg.betas, train_cfg.eps)
                losses.append(float(parts.total.data))
            train_ms = (time.perf_counter() - t0) * 1e3
            row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if val_seqs:
                t1 = time.perf_counter()
                if eval_fn is not None:
                    val = eval_fn(model)
                else:
                    val = evaluate(model, train_seqs, val_seqs, catalog,
                                   temperature=train_cfg.temperature).metrics["N@10"]
                row["val_ndcg10"] = float(val)
                row["eval_ms"] = (time.perf_counter() - t1) * 1e3
                if val > best_val:
                    best_val, best_epoch, best_state, stale = val, epoch, model.state_dict(), 0
                else:
                    stale += 1
            else:
                best_epoch, best_state = epoch, model.state_dict()
            row["wall_ms"] = train_ms
            history.append(row)
            log.info("epoch %d %s", epoch, row)
            if fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                fh.flush()
            if val_seqs and stale >= train_cfg.patience:
                break
    finally:
        if fh:
            fh.close()
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_val)
