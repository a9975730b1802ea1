"""Single-attribute prompt tuning against a frozen base model, and prompt stores."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nm
from .container import array_digest, read_container, write_container
from .corpus import PAD_ID, LabeledSentence, Vocab, encode
from .layout import CompositionPlan
from .model import LanguageModel
from .numeric import Tensor

log = logging.getLogger(__name__)


class IncompatibleStoreError(ValueError):
    pass


@dataclass
class AttributePrompt:
    family: str
    value: str
    matrix: np.ndarray  # [length, d_emb]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError(f"prompt matrix must be [l, d] with l >= 1, got {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise ValueError(f"prompt {self.key} has non-finite entries")

    @property
    def key(self) -> tuple[str, str]:
        return (self.family, self.value)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    def digest(self) -> str:
        return array_digest({"m": self.matrix}, {"family": self.family, "value": self.value})


def init_prompt(family: str, value: str, length: int, d_emb: int, seed: int) -> AttributePrompt:
    if length < 1:
        raise ValueError("prompt length must be >= 1")
    rng = np.random.default_rng(seed)
    return AttributePrompt(family, value, rng.normal(0.0, 0.02, (length, d_emb)), {"init_seed": seed})


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def text_loss(model: LanguageModel, plan: CompositionPlan, batch: np.ndarray) -> Tensor:
    """Mean NLL of the text tokens given the plan's blocks; prompt rows and padding excluded.

    ``batch`` holds BOS ... EOS PAD* rows.  Row t of the text predicts token t+1.
    """
    inputs, targets = batch[:, :-1], batch[:, 1:]
    logits = model(plan.forward_input(model, inputs))
    text_logits = _text_rows(logits, plan.prefix_length)
    return nm.cross_entropy_next_token(text_logits, targets, ignore_mask=targets == PAD_ID)


def _text_rows(logits: Tensor, start: int) -> Tensor:
    B, L, V = logits.shape

    def backward(g):
        full = np.zeros(logits.shape)
        full[:, start:, :] = g
        return (full,)

    return nm._result(logits.data[:, start:, :], (logits,), backward)


def train_single_prompt(
    model: LanguageModel,
    prompt: AttributePrompt,
    corpus: Sequence[LabeledSentence],
    vocab: Vocab,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[AttributePrompt, list[float]]:
    """Tune ``prompt`` so the frozen model continues with text of its attribute.

    Returns a new prompt and the per-epoch mean losses.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    for s in corpus:
        if s.labels.get(prompt.family) != prompt.value:
            raise ValueError(f"sentence {s.text!r} is not labelled {prompt.family}={prompt.value}")
    seqs = [encode(s.text, vocab, wrap=True) for s in corpus]
    S = Tensor(prompt.matrix.copy(), requires_grad=True, name=f"{prompt.family}={prompt.value}")
    plan = CompositionPlan([S], prompts=1)
    opt = nm.Adam([S], lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    before = model.digest()
    with model.frozen():
        for epoch in range(epochs):
            order = rng.permutation(len(seqs))
            losses = []
            for start in range(0, len(order), batch_size):
                batch = pad_batch([seqs[i] for i in order[start : start + batch_size]])
                loss = text_loss(model, plan, batch)
                nm.backward(loss)
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            log.info("prompt %s=%s epoch %d loss %.4f", prompt.family, prompt.value, epoch + 1, history[-1])
    assert model.digest() == before, "base model changed during prompt training"
    meta = dict(prompt.metadata)
    meta.update(epochs=epochs, seed=seed, lr=lr, batch_size=batch_size, base_digest=before,
                n_sentences=len(corpus))
    return AttributePrompt(prompt.family, prompt.value, S.data.copy(), meta), history


class PromptStore:
    """Prompts keyed by (family, value), all trained against one base model."""

    def __init__(self, base_digest: str):
        self.base_digest = base_digest
        self.prompts: dict[tuple[str, str], AttributePrompt] = {}

    def __len__(self) -> int:
        return len(self.prompts)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.prompts

    def __getitem__(self, key) -> AttributePrompt:
        try:
            return self.prompts[tuple(key)]
        except KeyError:
            raise KeyError(f"no prompt for {key[0]}={key[1]}") from None

    def keys(self):
        return list(self.prompts)

    def digest(self) -> str:
        """Combined digest of every stored prompt, independent of insertion order."""
        h = hashlib.sha256(self.base_digest.encode())
        for k in sorted(self.prompts):
            h.update(self.prompts[k].digest().encode())
        return h.hexdigest()

    def add(self, prompt: AttributePrompt) -> None:
        for other in self.prompts.values():
            if other.matrix.shape[1] != prompt.matrix.shape[1]:
                raise ValueError("prompts in a store must share d_emb")
            if other.length != prompt.length:
                raise ValueError("prompts in a store must share length")
        self.prompts[prompt.key] = prompt

    def save(self, path) -> str:
        meta = {
            "base_digest": self.base_digest,
            "prompts": [
                {"family": p.family, "value": p.value, "length": p.length,
                 "d_emb": p.matrix.shape[1], "metadata": p.metadata}
                for p in self.prompts.values()
            ],
        }
        arrays = {f"{p.family}={p.value}": p.matrix for p in self.prompts.values()}
        return write_container(path, "prompt-store", meta, arrays)

    @classmethod
    def load(cls, path, model: LanguageModel | None = None) -> "PromptStore":
        meta, arrays = read_container(path, kind="prompt-store")
        if model is not None and meta["base_digest"] != model.digest():
            raise IncompatibleStoreError(
                f"{path} was trained against model {meta['base_digest'][:12]}, "
                f"current model is {model.digest()[:12]}"
            )
        store = cls(meta["base_digest"])
        for rec in meta["prompts"]:
            m = arrays[f"{rec['family']}={rec['value']}"]
            if m.shape != (rec["length"], rec["d_emb"]):
                raise ValueError(f"{path}: prompt {rec['family']}={rec['value']} has shape {m.shape}")
            store.add(AttributePrompt(rec["family"], rec["value"], m, rec["metadata"]))
        return store
