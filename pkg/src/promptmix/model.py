"""Decoder-only transformer with caller-controlled position ids and attention bias."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .container import array_digest, read_container, write_container
from .numeric import Tensor

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_emb: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 256
    dropout_rate: float = 0.0

    def __post_init__(self):
        for f in ("vocab_size", "d_emb", "n_layers", "n_heads", "d_ff", "max_positions"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.d_emb % self.n_heads:
            raise ValueError(f"d_emb={self.d_emb} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class ForwardInput:
    """One (or a batch of) composed input sequence(s).

    ``input_rows`` is [L, d] or [B, L, d]; ``position_ids`` are 0-based indices
    into the position table; ``attention_bias`` is additive ([L, L] or
    [B, L, L]) with -inf marking blocked cells; ``loss_mask`` is true on rows
    holding text tokens.  With ``causal`` set, the forward pass also blocks
    keys that come later in row order; clear it when ``attention_bias``
    already encodes the full visibility pattern (e.g. for permuted rows).
    """

    input_rows: Tensor
    position_ids: np.ndarray
    attention_bias: np.ndarray
    loss_mask: np.ndarray
    causal: bool = True


def causal_bias(L: int) -> np.ndarray:
    return np.triu(np.full((L, L), -np.inf), k=1)


class LanguageModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        std = 0.02
        proj_std = std / math.sqrt(2 * c.n_layers)

        def add(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        add("tok_emb", rng.normal(0.0, std, (c.vocab_size, c.d_emb)))
        add("pos_emb", rng.normal(0.0, std, (c.max_positions, c.d_emb)))
        for i in range(c.n_layers):
            p = f"h{i}."
            add(p + "ln1.g", np.ones(c.d_emb))
            add(p + "ln1.b", np.zeros(c.d_emb))
            add(p + "attn.w_qkv", rng.normal(0.0, std, (c.d_emb, 3 * c.d_emb)))
            add(p + "attn.b_qkv", np.zeros(3 * c.d_emb))
            add(p + "attn.w_o", rng.normal(0.0, proj_std, (c.d_emb, c.d_emb)))
            add(p + "attn.b_o", np.zeros(c.d_emb))
            add(p + "ln2.g", np.ones(c.d_emb))
            add(p + "ln2.b", np.zeros(c.d_emb))
            add(p + "mlp.w_fc", rng.normal(0.0, std, (c.d_emb, c.d_ff)))
            add(p + "mlp.b_fc", np.zeros(c.d_ff))
            add(p + "mlp.w_proj", rng.normal(0.0, proj_std, (c.d_ff, c.d_emb)))
            add(p + "mlp.b_proj", np.zeros(c.d_emb))
        add("ln_f.g", np.ones(c.d_emb))
        add("ln_f.b", np.zeros(c.d_emb))

    # -- bookkeeping -------------------------------------------------------

    @property
    def d_emb(self) -> int:
        return self.config.d_emb

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def digest(self) -> str:
        return array_digest({k: v.data for k, v in self.params.items()}, asdict(self.config))

    @contextlib.contextmanager
    def frozen(self):
        """Exclude every model parameter from gradient tracking inside the block."""
        saved = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        try:
            yield self
        finally:
            for p, flag in zip(self.params.values(), saved):
                p.requires_grad = flag

    # -- computation -------------------------------------------------------

    def embed(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id {ids.max()} outside vocabulary of {self.config.vocab_size}")
        return nm.take_rows(self.params["tok_emb"], ids)

    def __call__(self, inp: ForwardInput, probe: list | None = None, rng=None) -> Tensor:
        return self.forward(inp, probe=probe, rng=rng)

    def forward(self, inp: ForwardInput, probe: list | None = None, rng=None) -> Tensor:
        """Next-token logits for every row: [L, V] or [B, L, V].

        When ``probe`` is a list, the attention probabilities of every layer
        ([B, H, L, L]) are appended to it.
        """
        rows = inp.input_rows
        squeeze = rows.ndim == 2
        if squeeze:
            rows = nm.reshape(rows, (1,) + rows.shape)
        B, L, d = rows.shape
        c = self.config
        if d != c.d_emb:
            raise nm.ShapeError(f"input rows have width {d}, model expects {c.d_emb}")
        pos = np.asarray(inp.position_ids, dtype=np.int64)
        if pos.shape[-1] != L:
            raise nm.ShapeError(f"{pos.shape[-1]} position ids for {L} rows")
        if L > c.max_positions or (pos.size and pos.max() >= c.max_positions):
            raise CapacityError(f"sequence needs position {max(L, int(pos.max()) + 1)} > max_positions={c.max_positions}")
        bias = np.asarray(inp.attention_bias, dtype=np.float64)
        if inp.causal:
            bias = bias + causal_bias(L)
        # [L, L] -> [1, 1, L, L]; [B, L, L] -> [B, 1, L, L]
        bias = bias.reshape((1 if bias.ndim == 2 else B, 1, L, L))

        P = self.params
        x = nm.add(rows, nm.take_rows(P["pos_emb"], pos))
        x = nm.dropout(x, c.dropout_rate, rng)
        H = c.n_heads
        dh = d // H
        scale = 1.0 / math.sqrt(dh)
        for i in range(c.n_layers):
            p = f"h{i}."
            h = nm.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = nm.add(nm.matmul(h, P[p + "attn.w_qkv"]), P[p + "attn.b_qkv"])
            qkv = nm.transpose(nm.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))
            q = _select(qkv, 0)
            k = _select(qkv, 1)
            v = _select(qkv, 2)
            scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), scale)
            att = nm.softmax_rows_with_bias(scores, bias)
            if probe is not None:
                probe.append(att.data.copy())
            y = nm.matmul(att, v)
            y = nm.reshape(nm.transpose(y, (0, 2, 1, 3)), (B, L, d))
            y = nm.add(nm.matmul(y, P[p + "attn.w_o"]), P[p + "attn.b_o"])
            x = nm.add(x, nm.dropout(y, c.dropout_rate, rng))
            h = nm.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = nm.gelu(nm.add(nm.matmul(h, P[p + "mlp.w_fc"]), P[p + "mlp.b_fc"]))
            h = nm.add(nm.matmul(h, P[p + "mlp.w_proj"]), P[p + "mlp.b_proj"])
            x = nm.add(x, nm.dropout(h, c.dropout_rate, rng))
        x = nm.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        logits = nm.matmul(x, nm.transpose(P["tok_emb"], (1, 0)))
        if squeeze:
            logits = nm.reshape(logits, (L, c.vocab_size))
        return logits

    # -- persistence -------------------------------------------------------

    def save(self, path) -> str:
        meta = {"config": asdict(self.config), "model_digest": self.digest()}
        write_container(path, "model", meta, {k: v.data for k, v in self.params.items()})
        return meta["model_digest"]

    @classmethod
    def load(cls, path) -> "LanguageModel":
        meta, arrays = read_container(path, kind="model")
        model = cls(ModelConfig(**meta["config"]))
        for name, p in model.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = arrays[name]
        if model.digest() != meta["model_digest"]:
            raise ValueError(f"{path}: content digest mismatch")
        return model


def _select(t: Tensor, i: int) -> Tensor:
    """Index the leading axis of ``t`` (gradient-aware)."""

    def backward(g):
        full = np.zeros(t.shape)
        full[i] = g
        return (full,)

    return nm._result(t.data[i], (t,), backward)


def text_input(model: LanguageModel, token_ids) -> ForwardInput:
    """Plain text (no prompts): ids [n] or [B, n] at positions 0..n-1."""
    ids = np.asarray(token_ids, dtype=np.int64)
    n = ids.shape[-1]
    return ForwardInput(
        input_rows=model.embed(ids),
        position_ids=np.arange(n),
        attention_bias=np.zeros((n, n)),
        loss_mask=np.ones(ids.shape, dtype=bool),
    )


def sequence_nll(model: LanguageModel, token_ids: Sequence[int]) -> float:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise ValueError("perplexity needs at least two tokens")
    logits = model(text_input(model, ids[:-1]))
    return nm.cross_entropy_next_token(logits, ids[1:]).item()


def perplexity(model: LanguageModel, token_ids: Sequence[int]) -> float:
    """exp(mean next-token NLL) of ``token_ids`` with no prompt attached."""
    return math.exp(sequence_nll(model, token_ids))


def pack_stream(sentences: Sequence[Sequence[int]], order: np.ndarray, window: int) -> np.ndarray:
    """Concatenate sentences in ``order`` and cut into rows of ``window + 1`` ids."""
    stream = np.concatenate([np.asarray(sentences[i], dtype=np.int64) for i in order])
    if stream.size < 2:
        raise ValueError("stream too short to train on")
    if stream.size <= window:
        return stream[None, :]
    n = (stream.size - 1) // window
    rows = [stream[j * window : j * window + window + 1] for j in range(n)]
    return np.stack(rows)


def pretrain_lm(
    model: LanguageModel,
    corpus: Sequence[Sequence[int]],
    epochs: int = 10,
    batch_size: int = 16,
    lr: float = 3e-3,
    seed: int = 0,
    window: int = 96,
) -> list[float]:
    """Next-token training on packed plain text.  Returns per-epoch mean loss.

    ``corpus`` is a list of token-id sentences, each already wrapped in BOS/EOS.
    Sentences are shuffled each epoch and packed into windows of ``window``
    tokens, so every position id up to ``window`` gets trained.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    V = model.config.vocab_size
    for s in corpus:
        if len(s) and max(s) >= V:
            raise ValueError(f"corpus token id {max(s)} outside vocabulary of {V}")
    window = min(window, model.config.max_positions)
    rng = np.random.default_rng(seed)
    opt = nm.Adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        rows = pack_stream(corpus, rng.permutation(len(corpus)), window)
        order = rng.permutation(len(rows))
        losses = []
        for start in range(0, len(rows), batch_size):
            batch = rows[order[start : start + batch_size]]
            logits = model(text_input(model, batch[:, :-1]), rng=rng)
            loss = nm.cross_entropy_next_token(logits, batch[:, 1:])
            nm.backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
    return history
