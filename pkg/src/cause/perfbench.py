"""Analytic attention/FFN cost model and forward-pass wall-clock timing."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .compressor import compress
from .datalog import Interaction, ItemCatalog, UserSequence, partition_history_recent
from .model import Batch, CauseModel, ModelConfig, assemble_sequence
from .seeding import derive_rng

# Published figures for the full-length and compressed models; echoed next to local measurements, never asserted.
PUBLISHED_REFERENCE = {
    "inference_ms_full_ilen2048": 11.10,
    "inference_ms_cause_ilen512": 1.87,
    "inference_speedup": 11.10 / 1.87,
    "headline_cost_reduction": "6x",
    "headline_accuracy_gain": "39%",
}


@dataclass(frozen=True)
class CostBreakdown:
    H: int
    L: int
    D: int
    r: int
    attention_cost: int
    ffn_cost: int

    @property
    def total(self) -> int:
        return self.attention_cost + self.ffn_cost

    def to_json(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def flop_cost(H: int, L: int, D: int, r: int = 4) -> CostBreakdown:
    """H·L²·D attention plus H·L·D²·r feed-forward, constants dropped."""
    if min(H, L, D) < 1 or r < 1:
        raise ValueError("H, L, D must be positive and r >= 1")
    return CostBreakdown(H, L, D, r, H * L * L * D, H * L * D * D * r)


def cost_ratio(L_big: int, L_small: int, H: int = 3, D: int = 64, r: int = 4) -> float:
    return flop_cost(H, L_big, D, r).total / flop_cost(H, L_small, D, r).total


@dataclass(frozen=True)
class TimingStats:
    L: int
    mean_ms: float
    std_ms: float
    min_ms: float
    warmup: int
    reps: int

    def to_json(self) -> dict:
        return asdict(self)


def random_batch(cfg: ModelConfig, L: int, batch: int, rng: np.random.Generator) -> Batch:
    """Random valid sequences filling exactly ``L`` tokens (history capped at V)."""
    per_event = 2 if cfg.assembly_mode == "interleaved" else 1
    fixed = 3 + (1 if cfg.use_history else 0)
    if L < fixed + per_event:
        raise ValueError(f"L={L} too short for one event")
    catalog = ItemCatalog(cfg.item_vocab, cfg.category_vocab,
                          {i: (i % cfg.category_vocab,) for i in range(cfg.item_vocab)})
    v = min(cfg.V_max, cfg.category_vocab, cfg.item_vocab, L - fixed - per_event) if cfg.use_history else 0
    if (L - fixed - v) % per_event:
        v = max(v - 1, 0)
    n_recent = (L - fixed - v) // per_event
    run_cfg = replace(cfg, max_recent=max(cfg.max_recent, n_recent))
    seqs = []
    for b in range(batch):
        # items 0..v-1 sit in distinct categories, so the plan has exactly v buckets
        hist = [Interaction(b, j, 0, j, j) for j in range(v)]
        plan = compress(hist, catalog, cfg.V_max, cfg.G_max) if cfg.use_history else None
        items = rng.integers(0, cfg.item_vocab, size=n_recent)
        acts = rng.integers(0, cfg.action_vocab, size=n_recent)
        recent = [Interaction(b, int(i), int(a), v + k, v + k) for k, (i, a) in enumerate(zip(items, acts))]
        seqs.append(assemble_sequence(b % cfg.user_vocab, plan, recent, catalog, run_cfg))
    return Batch.from_sequences(seqs, pad_to=L)


def time_forward(cfg: ModelConfig, L: int, batch: int = 4, warmup: int = 2, reps: int = 7,
                 seed: int = 0, dtype: str = "float32") -> TimingStats:
    """Wall-clock of untracked forward passes over random batches padded to ``L``."""
    if reps < 5:
        raise ValueError("reps must be >= 5")
    cfg = replace(cfg, dtype=dtype)
    per_event = 2 if cfg.assembly_mode == "interleaved" else 1
    need = (L - 4) // per_event + 1
    if cfg.max_len < L or cfg.max_recent < need:
        cfg = replace(cfg, max_recent=max(cfg.max_recent, need))
    model = CauseModel(cfg)
    rng = derive_rng(seed, f"bench-{L}")
    b = random_batch(cfg, L, batch, rng)
    times = []
    with T.no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            model.forward(b)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(dt)
    t = np.asarray(times)
    return TimingStats(L, float(t.mean()), float(t.std()), float(t.min()), warmup, reps)


def total_slen(v: int, recent_len: int) -> int:
    """Interleaved backbone length: 3 segment markers + user + v history + 2 per recent event."""
    return 4 + v + 2 * recent_len


def compression_report(seqs: Sequence[UserSequence], catalog: ItemCatalog, V: int = 8, G: int = 32,
                       ilen: int = 128, H: int = 3, D: int = 64, r: int = 4) -> dict:
    """Per-user and aggregate compression statistics with cost ratios."""
    users = []
    for seq in seqs:
        history, recent = partition_history_recent(seq, ilen)
        plan = compress(history, catalog, V, G)
        v = len(plan.buckets)
        slen = total_slen(v, len(recent))
        raw_slen = total_slen(0, len(seq))
        distinct = len({pos for b in plan.buckets for _, _, pos in b.items})
        users.append({
            "user": seq.user_id,
            "events": len(seq),
            "history": len(history),
            "recent": len(recent),
            "buckets": v,
            "retained_slots": plan.retained,
            "retained_events": distinct,
            "recent_slen": 2 * len(recent),
            "total_slen": slen,
            "uncompressed_slen": raw_slen,
            "flop_ratio": cost_ratio(raw_slen, slen, H, D, r),
        })
    agg = {}
    if users:
        for key in ("events", "history", "recent", "buckets", "retained_events", "total_slen",
                    "uncompressed_slen", "flop_ratio"):
            agg["mean_" + key] = float(np.mean([u[key] for u in users]))
        agg["max_total_slen"] = int(max(u["total_slen"] for u in users))
    return {"params": {"V": V, "G": G, "iLen": ilen, "H": H, "D": D, "r": r},
            "aggregate": agg, "users": users, "published_reference": PUBLISHED_REFERENCE}
