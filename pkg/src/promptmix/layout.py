"""Sequence layouts for prompt blocks: position ids, MAP mask, and input assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import numeric as nm
from .model import ForwardInput, LanguageModel
from .numeric import Tensor


class Mode(str, Enum):
    CONCAT = "concat"
    MASK_RP = "mask-rp"
    CONNECTOR = "connector"


class PositionMode(str, Enum):
    STANDARD = "standard"
    RP = "rp"


@dataclass(frozen=True)
class AttentionBiasSpec:
    l_u: int
    l_v: int
    n: int
    matrix: np.ndarray  # [(l_u+l_v+n) x (l_u+l_v+n)], 0 or -inf

    @property
    def l_p(self) -> int:
        return self.l_u + self.l_v


@dataclass(frozen=True)
class PositionIdSpec:
    mode: PositionMode
    ids: list[int]  # 1-based, as usually written

    def indices(self) -> np.ndarray:
        """0-based rows of the position table."""
        return np.asarray(self.ids, dtype=np.int64) - 1


def _check_lengths(*lengths: int) -> None:
    if any(n < 1 for n in lengths):
        raise ValueError(f"lengths must be >= 1, got {lengths}")


def build_map_mask(l_u: int, l_v: int, n: int) -> AttentionBiasSpec:
    """Block rows of the second prompt from attending to columns of the first prompt."""
    _check_lengths(l_u, l_v, n)
    L = l_u + l_v + n
    m = np.zeros((L, L))
    m[l_u : l_u + l_v, 0:l_u] = -np.inf
    return AttentionBiasSpec(l_u, l_v, n, m)


def build_rp_sequence(l_u: int, l_v: int, n: int) -> PositionIdSpec:
    """Both prompts restart at 1; text continues after the longer prompt."""
    _check_lengths(l_u, l_v, n)
    start = max(l_u, l_v)
    ids = list(range(1, l_u + 1)) + list(range(1, l_v + 1)) + list(range(start + 1, start + n + 1))
    return PositionIdSpec(PositionMode.RP, ids)


def build_standard_sequence(l_u: int, l_v: int, n: int) -> PositionIdSpec:
    _check_lengths(l_u, l_v, n)
    return PositionIdSpec(PositionMode.STANDARD, list(range(1, l_u + l_v + n + 1)))


@dataclass
class CompositionPlan:
    """Ordered prompt blocks (plus an optional connector) placed before the text.

    Each block is a [l, d] matrix shared by the batch, or a [B, l, d] array
    holding one block per example.  ``prompts`` counts how many leading blocks
    are attribute prompts; any remaining block is the connector.
    """

    blocks: list = field(default_factory=list)
    prompts: int = 0
    mode: Mode = Mode.CONCAT
    use_mask: bool = False
    use_rp: bool = False

    @classmethod
    def for_mode(cls, prompt_blocks: Sequence, mode: Mode, connector=None,
                 use_mask: bool | None = None, use_rp: bool | None = None) -> "CompositionPlan":
        mode = Mode(mode)
        blocks = list(prompt_blocks)
        if mode is Mode.CONNECTOR:
            if connector is None:
                raise ValueError("CONNECTOR mode needs a connector")
            blocks.append(connector)
        default = mode is Mode.MASK_RP
        return cls(
            blocks=blocks,
            prompts=len(prompt_blocks),
            mode=mode,
            use_mask=default if use_mask is None else use_mask,
            use_rp=default if use_rp is None else use_rp,
        )

    def lengths(self) -> list[int]:
        return [_rows(b).shape[-2] for b in self.blocks]

    @property
    def prefix_length(self) -> int:
        return sum(self.lengths())

    def text_position_start(self) -> int:
        """0-based position id of the first text row."""
        lengths = self.lengths()
        if not self.use_rp or self.prompts == 0:
            return sum(lengths)
        return max(lengths[: self.prompts]) + sum(lengths[self.prompts :])

    def position_ids(self, n: int) -> np.ndarray:
        lengths = self.lengths()
        if not self.use_rp or self.prompts == 0:
            return np.arange(sum(lengths) + n)
        parts = [np.arange(l) for l in lengths[: self.prompts]]
        nxt = max(lengths[: self.prompts])
        for l in lengths[self.prompts :]:
            parts.append(np.arange(nxt, nxt + l))
            nxt += l
        parts.append(np.arange(nxt, nxt + n))
        return np.concatenate(parts)

    def attention_bias(self, n: int) -> np.ndarray:
        """Additive bias including the causal triangle and, if enabled, the MAP mask."""
        lengths = self.lengths()
        L = sum(lengths) + n
        bias = np.triu(np.full((L, L), -np.inf), k=1)
        if self.use_mask and self.prompts >= 2:
            l_u, l_v = lengths[0], lengths[1]
            bias[l_u : l_u + l_v, 0:l_u] = -np.inf
        return bias

    def forward_input(self, model: LanguageModel, token_ids) -> ForwardInput:
        """Assemble [blocks; embedded tokens] for ids [n] or [B, n]."""
        ids = np.asarray(token_ids, dtype=np.int64)
        n = ids.shape[-1]
        text = model.embed(ids)
        parts = []
        for b in self.blocks:
            t = b if isinstance(b, Tensor) else Tensor(b)
            if ids.ndim == 2 and t.ndim == 2:
                t = nm.broadcast_to(t, (ids.shape[0],) + t.shape)
            elif ids.ndim == 1 and t.ndim == 3:
                raise ValueError("per-example blocks need batched token ids")
            if t.shape[-1] != model.d_emb:
                raise nm.ShapeError(f"prompt width {t.shape[-1]} != model d_emb {model.d_emb}")
            parts.append(t)
        rows = nm.concat(parts + [text], axis=-2) if parts else text
        P = self.prefix_length
        loss_mask = np.zeros(rows.shape[:-1], dtype=bool)
        loss_mask[..., P:] = True
        return ForwardInput(rows, self.position_ids(n), self.attention_bias(n), loss_mask)


def _rows(b):
    return b.data if isinstance(b, Tensor) else np.asarray(b)
