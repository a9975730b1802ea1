"""Synthetic attribute-labelled corpus, lexicon oracle, corpus files and vocabulary."""

from __future__ import annotations

import hashlib
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

ABSTAIN = "ABSTAIN"
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeFamily:
    name: str
    lexicons: dict[str, tuple[str, ...]]  # value -> marker words
    neutral: tuple[str, ...] = ()  # slot fillers that express no value

    @property
    def values(self) -> list[str]:
        return list(self.lexicons)


@dataclass(frozen=True)
class AttributeSchema:
    families: tuple[AttributeFamily, ...]

    def __post_init__(self):
        seen: dict[str, tuple[str, str]] = {}
        for fam in self.families:
            if len(fam.lexicons) < 2:
                raise CorpusError(f"family {fam.name} needs at least two values")
            for value, words in fam.lexicons.items():
                if not words:
                    raise CorpusError(f"{fam.name}={value} has an empty lexicon")
                for w in words:
                    if w in seen:
                        raise CorpusError(
                            f"marker {w!r} shared by {seen[w][0]}={seen[w][1]} and {fam.name}={value}"
                        )
                    seen[w] = (fam.name, value)
            for w in fam.neutral:
                if w in seen:
                    raise CorpusError(f"neutral filler {w!r} of {fam.name} is also a marker")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.families]

    def family(self, name: str) -> AttributeFamily:
        for f in self.families:
            if f.name == name:
                return f
        raise KeyError(name)

    def attributes(self) -> list[tuple[str, str]]:
        return [(f.name, v) for f in self.families for v in f.values]

    def pairs(self) -> list[tuple[tuple[str, str], ...]]:
        """Every cross-family combination (one value per family), in schema order."""
        combos: list[tuple[tuple[str, str], ...]] = [()]
        for fam in self.families:
            combos = [c + ((fam.name, v),) for c in combos for v in fam.values]
        return combos


@dataclass(frozen=True)
class LabeledSentence:
    text: str
    labels: dict[str, str]


@dataclass(frozen=True)
class CorpusSpec:
    """Generation recipe.

    Templates are whitespace-token strings; ``{FAMILY}`` marks an attribute
    slot and ``{name}`` any other slot drawn from ``fillers``.  A sentence for
    family F fills F's slot with a marker of the target value; the other
    family's slot gets a marker of a random value with probability
    ``cross_family_rate`` and a neutral filler otherwise.  Only F is recorded
    as a label.
    """

    schema: AttributeSchema
    templates: tuple[str, ...]
    fillers: dict[str, tuple[str, ...]]
    sentences_per_attribute: int = 300
    seed: int = 0
    cross_family_rate: float = 1.0


_SLOT = re.compile(r"\{(\w+)\}")


DEFAULT_PREFIXES = (
    "once upon a time",
    "the",
    "i think",
    "honestly",
    "last night",
    "my friend said",
    "in my opinion",
    "to be honest",
    "we went there and",
    "it is true that",
    "yesterday",
    "overall",
    "my family thinks",
    "the other day",
    "so",
)


def default_schema() -> AttributeSchema:
    return AttributeSchema(
        families=(
            AttributeFamily(
                "SENTIMENT",
                {
                    "POS": ("great", "delicious", "amazing", "excellent", "wonderful",
                            "fantastic", "lovely", "perfect", "superb", "tasty"),
                    "NEG": ("terrible", "awful", "bland", "horrible", "disgusting",
                            "stale", "mediocre", "greasy", "soggy", "gross"),
                },
                neutral=("okay", "ordinary", "average", "normal"),
            ),
            AttributeFamily(
                "TOPIC",
                {
                    "MEX": ("tacos", "burritos", "salsa", "guacamole", "enchiladas",
                            "quesadillas", "nachos", "tamales", "churros", "fajitas"),
                    "AMER": ("burgers", "fries", "hotdogs", "steak", "ribs",
                             "meatloaf", "pancakes", "wings", "brisket", "milkshakes"),
                    "ASIAN": ("sushi", "ramen", "dumplings", "noodles", "curry",
                              "tempura", "pho", "kimchi", "bibimbap", "dimsum"),
                },
                neutral=("food", "meal", "dishes", "lunch", "dinner"),
            ),
        )
    )


DEFAULT_TEMPLATES = (
    "{opener} the {TOPIC} here was {SENTIMENT} .",
    "{opener} we {verb} the {TOPIC} and it was {SENTIMENT} .",
    "{opener} the {SENTIMENT} {TOPIC} made my {people} {mood} .",
    "{opener} i {verb} {TOPIC} {time} and they were {SENTIMENT} .",
    "{opener} this place has {SENTIMENT} {TOPIC} and {extra} .",
    "{opener} {time} my {people} {verb} the {TOPIC} , so {SENTIMENT} .",
    "{opener} the {TOPIC} tasted {SENTIMENT} and the {extra2} was {plain} .",
    "{opener} we came back for the {TOPIC} because it is {SENTIMENT} .",
)

DEFAULT_FILLERS = {
    "opener": DEFAULT_PREFIXES,
    "verb": ("ordered", "tried", "had", "shared", "got"),
    "people": ("friends", "family", "kids", "coworkers", "parents"),
    "mood": ("talk", "laugh", "think", "stay"),
    "time": ("yesterday", "tonight", "last week", "on sunday", "for lunch"),
    "extra": ("a small patio", "long lines", "free parking", "loud music"),
    "extra2": ("service", "waiter", "music", "table"),
    "plain": ("quick", "slow", "busy", "quiet"),
}


def default_spec(sentences_per_attribute: int = 300, seed: int = 0,
                 cross_family_rate: float = 1.0) -> CorpusSpec:
    return CorpusSpec(
        schema=default_schema(),
        templates=DEFAULT_TEMPLATES,
        fillers=DEFAULT_FILLERS,
        sentences_per_attribute=sentences_per_attribute,
        seed=seed,
        cross_family_rate=cross_family_rate,
    )


def _check_spec(spec: CorpusSpec) -> None:
    names = set(spec.schema.names)
    for t in spec.templates:
        slots = _SLOT.findall(t)
        fam_slots = [s for s in slots if s in names]
        if len(fam_slots) != len(set(fam_slots)):
            raise CorpusError(f"template repeats a family slot: {t!r}")
        for s in slots:
            if s not in names and s not in spec.fillers:
                raise CorpusError(f"template slot {{{s}}} has no filler list: {t!r}")
    markers = {w for f in spec.schema.families for ws in f.lexicons.values() for w in ws}
    for name, options in spec.fillers.items():
        for opt in options:
            clash = markers.intersection(opt.split())
            if clash:
                raise CorpusError(f"filler {name} option {opt!r} contains marker(s) {sorted(clash)}")


def generate_corpus(spec: CorpusSpec) -> list[LabeledSentence]:
    """Exactly ``sentences_per_attribute`` sentences per (family, value), each labelled for one family."""
    _check_spec(spec)
    schema = spec.schema
    rng = random.Random(spec.seed)
    out = []
    for fam in schema.families:
        usable = [t for t in spec.templates if "{" + fam.name + "}" in t]
        if not usable:
            raise CorpusError(f"no template has a {{{fam.name}}} slot")
        for value in fam.values:
            for _ in range(spec.sentences_per_attribute):
                template = rng.choice(usable)
                words = {}
                for other in schema.families:
                    if other.name == fam.name:
                        words[other.name] = rng.choice(fam.lexicons[value])
                    elif rng.random() < spec.cross_family_rate or not other.neutral:
                        v = rng.choice(other.values)
                        words[other.name] = rng.choice(other.lexicons[v])
                    else:
                        words[other.name] = rng.choice(other.neutral)
                text = _SLOT.sub(lambda m: words.get(m.group(1)) or rng.choice(spec.fillers[m.group(1)]), template)
                out.append(LabeledSentence(" ".join(text.split()), {fam.name: value}))
    return out


def generate_documents(spec: CorpusSpec, n_documents: int, seed: int | None = None,
                       min_sentences: int = 2, max_sentences: int = 5,
                       palette: int = 2) -> list[list[str]]:
    """Unlabelled multi-sentence documents for base-model pretraining.

    Every document draws one latent value per family and a palette of
    ``palette`` marker words for it; each sentence mentions palette words (a
    family slot falls back to a neutral filler with probability
    ``1 - cross_family_rate``, but never both at once).  This is the general
    text a base model reads: attributes persist across sentences and co-occur
    freely, while no sentence carries a label.
    """
    _check_spec(spec)
    rng = random.Random(spec.seed + 1 if seed is None else seed)
    schema = spec.schema
    docs = []
    for _ in range(n_documents):
        latent = {}
        for f in schema.families:
            words = f.lexicons[rng.choice(f.values)]
            latent[f.name] = rng.sample(words, min(palette, len(words)))
        doc = []
        for _ in range(rng.randint(min_sentences, max_sentences)):
            template = rng.choice(spec.templates)
            present = [f for f in schema.families if "{" + f.name + "}" in template]
            keep = rng.choice(present) if present else None
            words = {}
            for f in present:
                if f is keep or rng.random() < spec.cross_family_rate or not f.neutral:
                    words[f.name] = rng.choice(latent[f.name])
                else:
                    words[f.name] = rng.choice(f.neutral)
            text = _SLOT.sub(lambda m: words.get(m.group(1)) or rng.choice(spec.fillers[m.group(1)]), template)
            doc.append(" ".join(text.split()))
        docs.append(doc)
    return docs


def fill_template(template: str, words: Mapping[str, str], fillers: Mapping[str, Sequence[str]],
                  seed: int = 0) -> str:
    """Fill an evaluation template; attribute slots from ``words``, others from ``fillers``."""
    rng = random.Random(seed)
    text = _SLOT.sub(lambda m: words[m.group(1)] if m.group(1) in words else rng.choice(fillers[m.group(1)]), template)
    return " ".join(text.split())


def oracle_label(text: str, schema: AttributeSchema) -> dict[str, str]:
    """Per family: the unique value whose lexicon occurs in ``text``, else ABSTAIN."""
    tokens = set(text.split())
    labels = {}
    for fam in schema.families:
        hits = [v for v, words in fam.lexicons.items() if tokens.intersection(words)]
        labels[fam.name] = hits[0] if len(hits) == 1 else ABSTAIN
    return labels


def corpus_digest(sentences: Iterable[LabeledSentence]) -> str:
    h = hashlib.sha256()
    for s in sentences:
        h.update(format_record(s).encode())
        h.update(b"\n")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# corpus files: "FAMILY=VALUE[,FAMILY=VALUE]*<TAB>sentence"


def format_record(s: LabeledSentence) -> str:
    labels = ",".join(f"{k}={v}" for k, v in s.labels.items())
    return f"{labels}\t{s.text}"


def write_corpus(path, sentences: Iterable[LabeledSentence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(format_record(s) + "\n")


def parse_corpus_lines(lines: Iterable[str], schema: AttributeSchema | None = None):
    """Parse records; returns ``(sentences, diagnostics)`` where diagnostics are ``(line_no, reason)``."""
    sentences, problems = [], []
    for no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if "\t" not in line:
            problems.append((no, "missing TAB between labels and text"))
            continue
        head, text = line.split("\t", 1)
        text = " ".join(text.split())
        if not text:
            problems.append((no, "empty sentence"))
            continue
        labels = {}
        reason = None
        for item in head.split(","):
            fam, eq, value = item.partition("=")
            fam, value = fam.strip(), value.strip()
            if not eq or not fam or not value:
                reason = f"label {item!r} is not FAMILY=VALUE"
                break
            if fam in labels:
                reason = f"family {fam} labelled twice"
                break
            if schema is not None:
                if fam not in schema.names:
                    reason = f"unknown family {fam}"
                    break
                if value not in schema.family(fam).values:
                    reason = f"unknown value {value} for {fam}"
                    break
            labels[fam] = value
        if reason:
            problems.append((no, reason))
            continue
        sentences.append(LabeledSentence(text, labels))
    return sentences, problems


def load_external_corpus(path, schema: AttributeSchema | None = None, strict: bool = False):
    """Read a corpus file.  Bad lines are logged (or raised when ``strict``)."""
    with open(path, encoding="utf-8") as fh:
        sentences, problems = parse_corpus_lines(fh, schema)
    if problems:
        detail = "; ".join(f"line {no}: {why}" for no, why in problems)
        if strict:
            raise CorpusError(f"{path}: {detail}")
        log.warning("%s: skipped %d malformed line(s): %s", path, len(problems), detail)
    if not sentences and not problems:
        log.warning("%s: corpus file is empty", path)
    return sentences


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved block")
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("duplicate token in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(list(RESERVED) + [ln for ln in lines if ln])


def build_vocab(corpora: Iterable[Iterable[str]]) -> Vocab:
    """Vocabulary over whitespace tokens, sorted for stability."""
    words = set()
    for corpus in corpora:
        for text in corpus:
            words.update(text.split())
    words.difference_update(RESERVED)
    return Vocab(list(RESERVED) + sorted(words))


def encode(text: str, vocab: Vocab, wrap: bool = False) -> list[int]:
    ids = [vocab.index.get(w, UNK_ID) for w in text.split()]
    return [BOS_ID] + ids + [EOS_ID] if wrap else ids


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    n = len(RESERVED)
    return " ".join(vocab.tokens[i] for i in ids if i >= n)
