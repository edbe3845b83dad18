"""nDCG@k and MRR for a single held-out item per user."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .datalog import ItemCatalog, UserSequence
from .model import Batch, CauseModel

KS = (1, 10, 20, 100, 200)
METRICS = tuple(f"N@{k}" for k in KS) + ("MRR",)


def rank_of_target(scores, target: int) -> int:
    """1-based rank; equal scores are ordered by candidate index."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    t = s[target]
    return int(1 + np.count_nonzero(s > t) + np.count_nonzero(s[:target] == t))


def ranks_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise ``rank_of_target`` for a (U, C) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    rows = np.arange(len(scores))
    t = scores[rows, targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t) | ((scores == t) & (idx < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr(rank: int) -> float:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / rank


def metric_means(ranks) -> dict[str, float]:
    r = np.asarray(ranks, dtype=np.float64)
    out = {f"N@{k}": float(np.mean(np.where(r <= k, 1.0 / np.log2(r + 1), 0.0))) for k in KS}
    out["MRR"] = float(np.mean(1.0 / r))
    return out


@dataclass
class EvalReport:
    metrics: dict[str, float]
    users: int
    protocol: str
    fingerprint: str = ""
    ranks: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"metrics": self.metrics, "users": self.users, "protocol": self.protocol,
                "config_hash": self.fingerprint}

    def csv_header(self) -> str:
        return ",".join(["protocol", "users", *METRICS, "config_hash"])

    def csv_row(self) -> str:
        vals = [f"{self.metrics[m]:.6f}" for m in METRICS]
        return ",".join([self.protocol, str(self.users), *vals, self.fingerprint])


def config_hash(config: dict) -> str:
    """Short content hash of a config mapping (git-style, 12 hex chars)."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def parse_protocol(protocol: str) -> tuple[str, int]:
    if protocol == "full":
        return "full", 0
    if protocol.startswith("sampled:"):
        k = int(protocol.split(":", 1)[1])
        if k < 1:
            raise ValueError("sampled protocol needs K >= 1")
        return "sampled", k
    raise ValueError(f"unknown protocol {protocol!r}; use 'full' or 'sampled:K'")


def last_position_embeddings(model: CauseModel, seqs, batch_size: int = 256) -> np.ndarray:
    """e' at each sequence's final token, (U, D)."""
    outs = []
    with T.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            out = model.forward(Batch.from_sequences(chunk)).data
            last = np.array([len(s) - 1 for s in chunk])
            outs.append(out[np.arange(len(chunk)), last])
    return np.concatenate(outs, axis=0)


def score_matrix(model: CauseModel, e_last: np.ndarray, temperature: float | None = None) -> np.ndarray:
    tau = model.cfg.temperature if temperature is None else temperature
    return e_last @ model.params["E_item"].data.T / tau


def evaluate(model: CauseModel, context_seqs: Sequence[UserSequence], target_seqs: Sequence[UserSequence],
             catalog: ItemCatalog, protocol: str = "full", seed: int = 0,
             temperature: float | None = None, config: dict | None = None) -> EvalReport:
    """Rank each user's held-out item given their preceding events.

    ``target_seqs`` holds the held-out event(s) per user; only the first is
    scored.  ``context_seqs`` provides the events before it.
    """
    from .seeding import derive_rng
    from .training import context_sequence

    kind, k_eval = parse_protocol(protocol)
    contexts = {s.user_id: s for s in context_seqs}
    seqs, targets = [], []
    for ts in target_seqs:
        if not ts.events or ts.user_id not in contexts or not contexts[ts.user_id].events:
            continue
        seqs.append(context_sequence(ts.user_id, list(contexts[ts.user_id].events), catalog, model.cfg))
        targets.append(ts.events[0].item_id)
    if not seqs:
        raise ValueError("no eligible users to evaluate")
    targets = np.asarray(targets)
    scores = score_matrix(model, last_position_embeddings(model, seqs), temperature)
    if kind == "full":
        ranks = ranks_of_targets(scores, targets)
    else:
        ranks = sampled_ranks(scores, targets, k_eval, derive_rng(seed, "eval-sampled"))
    fp = config_hash(config if config is not None else {"model": model.cfg.to_dict(), "protocol": protocol})
    return EvalReport(metric_means(ranks), len(seqs), protocol, fp, ranks)


def sampled_ranks(scores: np.ndarray, targets: np.ndarray, k_eval: int, rng: np.random.Generator) -> np.ndarray:
    """Rank among target + ``k_eval`` distinct non-target items, kept in item-id order."""
    U, N = scores.shape
    k_eval = min(k_eval, N - 1)
    ranks = np.empty(U, dtype=np.int64)
    for u in range(U):
        pool = np.delete(np.arange(N), targets[u])
        cands = np.sort(np.concatenate([[targets[u]], rng.choice(pool, size=k_eval, replace=False)]))
        ranks[u] = rank_of_target(scores[u, cands], int(np.searchsorted(cands, targets[u])))
    return ranks


def evaluate_targets(model: CauseModel, examples, temperature: float | None = None,
                     batch_size: int = 128) -> dict[str, float]:
    """Full-catalog metrics over every item-target position of ``examples``."""
    all_ranks = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = Batch.from_sequences(examples[start:start + batch_size])
            out = model.forward(batch).data
            tgt = batch.padded("item_targets")
            b, l = np.nonzero(tgt >= 0)
            scores = score_matrix(model, out[b, l], temperature)
            all_ranks.append(ranks_of_targets(scores, tgt[b, l]))
    return metric_means(np.concatenate(all_ranks))
