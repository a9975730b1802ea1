"""Multi-attribute composition: attribute classifiers, pseudo prompts and the connector."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import numeric as nm
from .container import array_digest, read_container, write_container
from .corpus import AttributeSchema, LabeledSentence, Vocab, encode
from .layout import CompositionPlan, Mode
from .model import ForwardInput, LanguageModel
from .numeric import Tensor
from .prompts import AttributePrompt, PromptStore, pad_batch, text_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# attribute classifier


@dataclass
class AttributeClassifier:
    """Bag-of-tokens softmax classifier for one attribute family."""

    family: str
    classes: list[str]
    weights: np.ndarray  # [V, n_class]
    bias: np.ndarray  # [n_class]
    vocab_digest: str
    metadata: dict = field(default_factory=dict)

    def features(self, texts: Sequence[str], vocab: Vocab) -> np.ndarray:
        return bag_of_tokens(texts, vocab)

    def predict_proba(self, text: str, vocab: Vocab) -> np.ndarray:
        return self.predict_proba_batch([text], vocab)[0]

    def predict_proba_batch(self, texts: Sequence[str], vocab: Vocab) -> np.ndarray:
        if vocab.digest() != self.vocab_digest:
            raise ValueError("classifier was trained with a different vocabulary")
        z = bag_of_tokens(texts, vocab) @ self.weights + self.bias
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, text: str, vocab: Vocab) -> str:
        return self.classes[int(np.argmax(self.predict_proba(text, vocab)))]

    def save(self, path) -> None:
        meta = {"family": self.family, "classes": self.classes,
                "vocab_digest": self.vocab_digest, "metadata": self.metadata}
        write_container(path, "classifier", meta, {"weights": self.weights, "bias": self.bias})

    @classmethod
    def load(cls, path) -> "AttributeClassifier":
        meta, arrays = read_container(path, kind="classifier")
        return cls(meta["family"], list(meta["classes"]), arrays["weights"], arrays["bias"],
                   meta["vocab_digest"], meta["metadata"])


def bag_of_tokens(texts: Sequence[str], vocab: Vocab) -> np.ndarray:
    """Binary token-presence features, one row per text."""
    x = np.zeros((len(texts), len(vocab)))
    for i, t in enumerate(texts):
        x[i, encode(t, vocab)] = 1.0
    return x


def train_attribute_classifier(
    family: str,
    corpus: Sequence[LabeledSentence],
    vocab: Vocab,
    classes: Sequence[str] | None = None,
    epochs: int = 60,
    lr: float = 0.05,
    seed: int = 0,
    held_out_fraction: float = 0.1,
) -> AttributeClassifier:
    """Fit on sentences labelled for ``family``; held-out accuracy lands in ``metadata``."""
    data = [s for s in corpus if family in s.labels]
    if classes is None:
        classes = sorted({s.labels[family] for s in data})
    classes = list(classes)
    if len({s.labels[family] for s in data}) < 2:
        raise ValueError(f"classifier for {family} needs at least two classes in the corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_test = max(1, int(round(held_out_fraction * len(data))))
    test, train = order[:n_test], order[n_test:]
    x = bag_of_tokens([s.text for s in data], vocab)
    y = np.array([classes.index(s.labels[family]) for s in data])
    W = Tensor(np.zeros((len(vocab), len(classes))), requires_grad=True, name="weights")
    b = Tensor(np.zeros(len(classes)), requires_grad=True, name="bias")
    opt = nm.Adam([W, b], lr=lr)
    for _ in range(epochs):
        loss = nm.cross_entropy_next_token(nm.add(nm.matmul(Tensor(x[train]), W), b), y[train])
        nm.backward(loss)
        opt.step()
    pred = (x[test] @ W.data + b.data).argmax(axis=1)
    acc = float((pred == y[test]).mean())
    log.info("classifier %s held-out accuracy %.3f", family, acc)
    return AttributeClassifier(
        family, classes, W.data.copy(), b.data.copy(), vocab.digest(),
        {"held_out_accuracy": acc, "n_train": int(len(train)), "n_test": int(n_test),
         "seed": seed, "epochs": epochs},
    )


# ---------------------------------------------------------------------------
# pseudo prompts


def pseudo_prompt_argmax(probs: np.ndarray, classifier: AttributeClassifier,
                         store: PromptStore) -> AttributePrompt:
    """Stored prompt of the most probable class; ties go to the lowest class index."""
    z = int(np.argmax(probs))
    return store[(classifier.family, classifier.classes[z])]


def pseudo_prompt_weighted(probs: np.ndarray, classifier: AttributeClassifier,
                           store: PromptStore) -> np.ndarray:
    """Probability-weighted element-wise sum of the family's stored prompts."""
    prompts = [store[(classifier.family, c)].matrix for c in classifier.classes]
    if len({p.shape for p in prompts}) != 1:
        raise ValueError(f"prompts of {classifier.family} differ in shape")
    out = np.zeros_like(prompts[0])
    for p_z, s_z in zip(probs, prompts):
        out += p_z * s_z
    return out


def build_pseudo_prompt_argmax(classifier, sentence: str, store: PromptStore, vocab: Vocab) -> AttributePrompt:
    return pseudo_prompt_argmax(classifier.predict_proba(sentence, vocab), classifier, store)


def build_pseudo_prompt_weighted(classifier, sentence: str, store: PromptStore, vocab: Vocab) -> np.ndarray:
    return pseudo_prompt_weighted(classifier.predict_proba(sentence, vocab), classifier, store)


# ---------------------------------------------------------------------------
# composition


def ordered_prompts(store: PromptStore, attributes: Sequence[tuple[str, str]]) -> list[np.ndarray]:
    return [store[a].matrix for a in attributes]


def make_plan(store: PromptStore, attributes: Sequence[tuple[str, str]], mode: Mode,
              connector: "Connector | None" = None, use_mask: bool | None = None,
              use_rp: bool | None = None) -> CompositionPlan:
    """Plan for prompts in the given attribute order (order matters for CONCAT)."""
    mode = Mode(mode)
    if mode is Mode.CONNECTOR:
        if connector is None:
            raise ValueError("CONNECTOR mode needs a trained connector")
        if use_mask is None:
            use_mask = connector.metadata.get("use_mask", False)
        if use_rp is None:
            use_rp = connector.metadata.get("use_rp", False)
    return CompositionPlan.for_mode(
        ordered_prompts(store, attributes), mode,
        connector=None if connector is None else connector.matrix,
        use_mask=use_mask, use_rp=use_rp,
    )


def compose(prompts: Sequence, mode: Mode, prefix: Sequence[int], model: LanguageModel,
            connector: "Connector | np.ndarray | None" = None) -> ForwardInput:
    matrices = [p.matrix if isinstance(p, AttributePrompt) else p for p in prompts]
    for m in matrices:
        if m.shape[1] != model.d_emb:
            raise nm.ShapeError(f"prompt width {m.shape[1]} != model d_emb {model.d_emb}")
    c = connector.matrix if isinstance(connector, Connector) else connector
    plan = CompositionPlan.for_mode(matrices, mode, connector=c)
    need = plan.text_position_start() + len(prefix)
    if need > model.config.max_positions or plan.prefix_length + len(prefix) > model.config.max_positions:
        raise ValueError(f"composed input needs {need} positions, model has {model.config.max_positions}")
    return plan.forward_input(model, prefix)


# ---------------------------------------------------------------------------
# connector


class PseudoMode(str, Enum):
    ARGMAX = "argmax"
    WEIGHTED = "weighted"


@dataclass
class Connector:
    matrix: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    def digest(self) -> str:
        return array_digest({"c": self.matrix})

    def save(self, path) -> None:
        write_container(path, "connector", self.metadata, {"connector": self.matrix})

    @classmethod
    def load(cls, path, model: LanguageModel | None = None) -> "Connector":
        meta, arrays = read_container(path, kind="connector")
        if model is not None and meta.get("base_digest") != model.digest():
            raise ValueError(f"{path} was trained against a different base model")
        return cls(arrays["connector"], meta)


def init_connector(length: int, d_emb: int, seed: int) -> Connector:
    if length < 1:
        raise ValueError("connector length must be >= 1")
    return Connector(np.random.default_rng(seed).normal(0.0, 0.02, (length, d_emb)), {"init_seed": seed})


@dataclass
class ConnectorExample:
    ids: list[int]
    blocks: list[np.ndarray]  # one matrix per family, schema order
    pair: tuple[tuple[str, str], ...]  # (family, value) per family: real label + pseudo argmax


def connector_examples(store: PromptStore, classifiers: Mapping[str, AttributeClassifier],
                       corpus: Sequence[LabeledSentence], vocab: Vocab, schema: AttributeSchema,
                       pseudo_mode: str) -> list[ConnectorExample]:
    """Pair every single-label sentence with its real prompt and a pseudo prompt per other family."""
    pseudo_mode = PseudoMode(pseudo_mode)
    probs = {}
    for fam in schema.names:
        if fam in classifiers:
            probs[fam] = classifiers[fam].predict_proba_batch([s.text for s in corpus], vocab)
    out = []
    for i, s in enumerate(corpus):
        blocks, pair = [], []
        for fam in schema.names:
            if fam in s.labels:
                key = (fam, s.labels[fam])
                blocks.append(store[key].matrix)
                pair.append(key)
                continue
            if fam not in classifiers:
                raise ValueError(f"no classifier for family {fam}")
            clf, p = classifiers[fam], probs[fam][i]
            pair.append((fam, clf.classes[int(np.argmax(p))]))
            if pseudo_mode == PseudoMode.ARGMAX:
                blocks.append(pseudo_prompt_argmax(p, clf, store).matrix)
            else:
                blocks.append(pseudo_prompt_weighted(p, clf, store))
        out.append(ConnectorExample(encode(s.text, vocab, wrap=True), blocks, tuple(pair)))
    return out


def train_connector(
    model: LanguageModel,
    store: PromptStore,
    classifiers: Mapping[str, AttributeClassifier],
    corpus: Sequence[LabeledSentence],
    vocab: Vocab,
    schema: AttributeSchema,
    pseudo_mode: str = PseudoMode.ARGMAX,
    length: int = 8,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-2,
    seed: int = 0,
    held_out_pair: tuple[tuple[str, str], ...] | None = None,
    use_mask: bool = False,
    use_rp: bool = False,
) -> tuple[Connector, list[float]]:
    """Train only the connector on [real/pseudo prompts; C; sentence] inputs."""
    if store.base_digest != model.digest():
        raise ValueError("prompt store was trained against a different base model")
    if len(schema.names) != 2:
        raise ValueError("connector training supports exactly two attribute families")
    examples = connector_examples(store, classifiers, corpus, vocab, schema, pseudo_mode)
    if held_out_pair is not None:
        held = frozenset(tuple(a) for a in held_out_pair)
        examples = [e for e in examples if frozenset(e.pair) != held]
    if not examples:
        raise ValueError("no connector training examples left")
    conn = init_connector(length, model.d_emb, seed)
    C = Tensor(conn.matrix.copy(), requires_grad=True, name="connector")
    opt = nm.Adam([C], lr=lr)
    rng = np.random.default_rng(seed)
    model_before = model.digest()
    prompts_before = {k: p.digest() for k, p in store.prompts.items()}
    history = []
    with model.frozen():
        for epoch in range(epochs):
            order = rng.permutation(len(examples))
            losses = []
            for start in range(0, len(order), batch_size):
                chunk = [examples[i] for i in order[start : start + batch_size]]
                blocks = [np.stack([e.blocks[j] for e in chunk]) for j in range(2)]
                plan = CompositionPlan(blocks + [C], prompts=2, mode=Mode.CONNECTOR,
                                       use_mask=use_mask, use_rp=use_rp)
                loss = text_loss(model, plan, pad_batch([e.ids for e in chunk]))
                nm.backward(loss)
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            log.info("connector epoch %d loss %.4f", epoch + 1, history[-1])
    assert model.digest() == model_before, "base model changed during connector training"
    assert {k: p.digest() for k, p in store.prompts.items()} == prompts_before, "prompts changed"
    meta = {
        "base_digest": model_before,
        "pseudo_mode": PseudoMode(pseudo_mode).value,
        "length": length,
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "batch_size": batch_size,
        "held_out_pair": None if held_out_pair is None else [list(a) for a in held_out_pair],
        "n_examples": len(examples),
        "use_mask": use_mask,
        "use_rp": use_rp,
    }
    return Connector(C.data.copy(), meta), history
