"""Autoregressive decoding: greedy and seeded top-k sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .corpus import EOS_ID, PAD_ID
from .layout import CompositionPlan
from .model import LanguageModel


class Strategy(str, Enum):
    GREEDY = "greedy"
    TOP_K = "top-k"


@dataclass(frozen=True)
class DecodeConfig:
    strategy: Strategy = Strategy.TOP_K
    k: int = 10
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 42

    def validate(self, vocab_size: int) -> None:
        if self.strategy is Strategy.TOP_K and not 1 <= self.k <= vocab_size:
            raise ValueError(f"k={self.k} must lie in [1, {vocab_size}]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass
class Generation:
    sequences: list[list[int]]  # new tokens only, EOS stripped
    truncated: list[bool] = field(default_factory=list)  # ran out of position capacity


def _pick(logits: np.ndarray, cfg: DecodeConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.strategy is Strategy.GREEDY:
        return logits.argmax(axis=-1)
    out = np.empty(logits.shape[0], dtype=np.int64)
    for b, row in enumerate(logits):
        # stable sort keeps the lowest id first among ties, so k=1 equals argmax
        top = np.argsort(-row, kind="stable")[: cfg.k]
        z = row[top] / cfg.temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        out[b] = top[rng.choice(len(top), p=p)]
    return out


def generate(
    model: LanguageModel,
    plan: CompositionPlan | None,
    prefix: list[int],
    cfg: DecodeConfig,
    n_samples: int = 1,
) -> Generation:
    """Continue ``prefix`` (BOS included by the caller) ``n_samples`` times in one batch."""
    if len(prefix) == 0:
        raise ValueError("prefix must be non-empty")
    cfg.validate(model.config.vocab_size)
    plan = plan or CompositionPlan()
    rng = np.random.default_rng(cfg.seed)
    ids = np.tile(np.asarray(prefix, dtype=np.int64), (n_samples, 1))
    done = np.zeros(n_samples, dtype=bool)
    truncated = np.zeros(n_samples, dtype=bool)
    start = plan.text_position_start()
    cap = model.config.max_positions
    for _ in range(cfg.max_new_tokens):
        if start + ids.shape[1] > cap or plan.prefix_length + ids.shape[1] > cap:
            truncated |= ~done
            break
        logits = model(plan.forward_input(model, ids)).data[:, -1, :]
        nxt = _pick(logits, cfg, rng)
        nxt = np.where(done, PAD_ID, nxt)
        done |= nxt == EOS_ID
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        if done.all():
            break
    seqs = []
    for row in ids[:, len(prefix):]:
        out = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            out.append(int(t))
        seqs.append(out)
    return Generation(seqs, truncated.tolist())
