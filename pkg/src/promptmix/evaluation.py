"""Generation runs and the automatic metrics: correctness, perplexity, Dist-n."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import ABSTAIN, BOS_ID, AttributeSchema, Vocab, decode, encode, oracle_label
from .decoding import DecodeConfig, Strategy, generate
from .layout import CompositionPlan
from .model import LanguageModel, perplexity

Judge = Callable[[str], Mapping[str, str]]


@dataclass
class GenerationRun:
    mode: str
    attributes: list[tuple[str, str]]  # target (family, value) pairs, in prompt order
    prefixes: list[str]
    samples_per_prefix: int
    decode: DecodeConfig
    sentences: list[str] = field(default_factory=list)
    truncated: int = 0
    metadata: dict = field(default_factory=dict)

    def header(self) -> dict:
        d = asdict(self.decode)
        d["strategy"] = self.decode.strategy.value
        return {
            "mode": self.mode,
            "attributes": ",".join(f"{f}={v}" for f, v in self.attributes),
            "prefixes": len(self.prefixes),
            "samples_per_prefix": self.samples_per_prefix,
            "decode": d,
            "truncated": self.truncated,
            **self.metadata,
        }


def run_generation(
    model: LanguageModel,
    plan: CompositionPlan | None,
    vocab: Vocab,
    attributes: Sequence[tuple[str, str]],
    prefixes: Sequence[str],
    samples_per_prefix: int,
    decode_cfg: DecodeConfig,
    mode: str = "single",
) -> GenerationRun:
    """Sample continuations of every prefix; prefix i decodes with seed ``cfg.seed + i``."""
    run = GenerationRun(mode, [tuple(a) for a in attributes], list(prefixes), samples_per_prefix, decode_cfg)
    for i, prefix in enumerate(prefixes):
        cfg = DecodeConfig(decode_cfg.strategy, decode_cfg.k, decode_cfg.temperature,
                           decode_cfg.max_new_tokens, decode_cfg.seed + i)
        n = 1 if cfg.strategy is Strategy.GREEDY else samples_per_prefix
        g = generate(model, plan, [BOS_ID] + encode(prefix, vocab), cfg, n_samples=n)
        for seq, cut in zip(g.sequences, g.truncated):
            if cut:
                run.truncated += 1
                continue
            run.sentences.append(" ".join((prefix + " " + decode(seq, vocab)).split()))
    return run


def oracle_judge(schema: AttributeSchema) -> Judge:
    return lambda text: oracle_label(text, schema)


def classifier_judge(classifiers, vocab: Vocab) -> Judge:
    return lambda text: {fam: clf.predict(text, vocab) for fam, clf in classifiers.items()}


def eval_correctness(sentences: Sequence[str], targets: Sequence[tuple[str, str]], judge: Judge) -> dict[str, float]:
    """Fraction of sentences judged to carry each target value (ABSTAIN counts as wrong)."""
    if not sentences:
        raise ValueError("empty run")
    hits = {fam: 0 for fam, _ in targets}
    for s in sentences:
        labels = judge(s)
        for fam, value in targets:
            got = labels.get(fam, ABSTAIN)
            hits[fam] += got == value
    return {fam: hits[fam] / len(sentences) for fam in hits}


def eval_distinct(sentences: Sequence[str], n: int) -> float:
    """Unique n-grams across all sentences over the total word count."""
    grams = set()
    words = 0
    for s in sentences:
        toks = s.split()
        words += len(toks)
        grams.update(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    return len(grams) / words if words else 0.0


def eval_ppl(sentences: Sequence[str], scorer: LanguageModel, vocab: Vocab) -> float:
    """Mean per-sentence perplexity of BOS + sentence + EOS under ``scorer`` (no prompts)."""
    if scorer.config.vocab_size != len(vocab):
        raise ValueError("scorer vocabulary does not match")
    if not sentences:
        raise ValueError("empty run")
    return float(np.mean([perplexity(scorer, encode(s, vocab, wrap=True)) for s in sentences]))


def evaluate_run(run: GenerationRun, judge: Judge, scorer: LanguageModel | None, vocab: Vocab) -> dict:
    corr = eval_correctness(run.sentences, run.attributes, judge)
    out = {
        "correctness": corr,
        "correctness_avg": float(np.mean(list(corr.values()))),
        "ppl": eval_ppl(run.sentences, scorer, vocab) if scorer is not None else None,
        "dist1": eval_distinct(run.sentences, 1),
        "dist2": eval_distinct(run.sentences, 2),
        "dist3": eval_distinct(run.sentences, 3),
        "n_sentences": len(run.sentences),
    }
    return out


# ---------------------------------------------------------------------------
# files


def write_dump(path, run: GenerationRun) -> None:
    """Header lines ``# key: json-value`` then one sentence per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in run.header().items():
            fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        for s in run.sentences:
            fh.write(s + "\n")


def read_dump(path) -> tuple[dict, list[str]]:
    header, sentences = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# ") and not sentences:
            key, _, value = line[2:].partition(": ")
            try:
                header[key] = json.loads(value)
            except json.JSONDecodeError:
                header[key] = value
        elif line.strip():
            sentences.append(line.strip())
    return header, sentences


def parse_attributes(text: str) -> list[tuple[str, str]]:
    out = []
    for item in text.split(","):
        fam, eq, value = item.partition("=")
        if not eq or not fam.strip() or not value.strip():
            raise ValueError(f"attribute {item!r} is not FAMILY=VALUE")
        out.append((fam.strip(), value.strip()))
    return out


def _clean(obj):
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def emit_report(report: Mapping, path) -> bytes:
    """Write a JSON report in insertion order; returns the bytes written."""
    data = (json.dumps(_clean(report), indent=2) + "\n").encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data


def grid_summary(rows: Sequence[Mapping]) -> dict:
    """Average correctness/ppl/dist over per-pair rows."""
    keys = ["correctness_avg", "ppl", "dist1", "dist2", "dist3"]
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    fams = {}
    for r in rows:
        for fam, v in r["correctness"].items():
            fams.setdefault(fam, []).append(v)
    out["correctness"] = {f: float(np.mean(v)) for f, v in fams.items()}
    return out
