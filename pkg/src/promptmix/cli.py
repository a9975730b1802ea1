"""Command-line pipeline: corpus, pretrain, prompts, classifiers, connector, generate, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .composition import (
    AttributeClassifier,
    Connector,
    make_plan,
    train_attribute_classifier,
    train_connector,
)
from .config import ConfigError, RunConfig
from .container import ContainerError
from .corpus import (
    DEFAULT_FILLERS,
    DEFAULT_PREFIXES,
    DEFAULT_TEMPLATES,
    AttributeSchema,
    CorpusError,
    CorpusSpec,
    LabeledSentence,
    Vocab,
    build_vocab,
    corpus_digest,
    default_schema,
    encode,
    generate_corpus,
    generate_documents,
    load_external_corpus,
    write_corpus,
)
from .decoding import DecodeConfig, Strategy
from .evaluation import (
    GenerationRun,
    classifier_judge,
    emit_report,
    eval_correctness,
    eval_distinct,
    eval_ppl,
    grid_summary,
    oracle_judge,
    parse_attributes,
    read_dump,
    run_generation,
    write_dump,
)
from .layout import CompositionPlan, Mode
from .model import LanguageModel, ModelConfig, pretrain_lm
from .prompts import IncompatibleStoreError, PromptStore, init_prompt, train_single_prompt

log = logging.getLogger("promptmix")


class MissingArtifactError(RuntimeError):
    pass


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"{what} not found at {path}; run `promptmix {producer} --config <config>` first"
        )
    return path


def schema_for(cfg: RunConfig) -> AttributeSchema:
    return default_schema()


def corpus_spec(cfg: RunConfig, rate: float | None = None) -> CorpusSpec:
    c = cfg.corpus
    return CorpusSpec(schema_for(cfg), DEFAULT_TEMPLATES, DEFAULT_FILLERS, c.sentences_per_attribute,
                      c.seed, c.cross_family_rate if rate is None else rate)


# ---------------------------------------------------------------------------
# artifact loaders


def load_corpus(cfg: RunConfig) -> list[LabeledSentence]:
    path = _require(cfg.path("corpus"), "labelled corpus", "corpus")
    return load_external_corpus(path, schema_for(cfg), strict=True)


def load_vocab(cfg: RunConfig) -> Vocab:
    return Vocab.load(_require(cfg.path("vocab"), "vocabulary", "corpus"))


def load_model(cfg: RunConfig) -> LanguageModel:
    return LanguageModel.load(_require(cfg.path("model"), "base model checkpoint", "pretrain"))


def load_store(cfg: RunConfig, model: LanguageModel) -> PromptStore:
    path = _require(cfg.path("prompts"), "prompt store", "train-prompt")
    return PromptStore.load(path, model)


def classifier_path(cfg: RunConfig, family: str) -> Path:
    return cfg.root / f"classifier-{family}.bin"


def load_classifiers(cfg: RunConfig) -> dict[str, AttributeClassifier]:
    return {
        fam: AttributeClassifier.load(_require(classifier_path(cfg, fam), f"{fam} classifier", "train-classifiers"))
        for fam in schema_for(cfg).names
    }


def load_connector(cfg: RunConfig, model: LanguageModel, path: Path | None = None) -> Connector:
    path = _require(path or cfg.path("connector"), "connector", "train-connector")
    return Connector.load(path, model)


def decode_config(cfg: RunConfig, seed: int | None = None) -> DecodeConfig:
    d = cfg.decode
    return DecodeConfig(Strategy(d.strategy), d.k, d.temperature, d.max_new_tokens,
                        d.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# stages


def cmd_corpus(cfg: RunConfig) -> dict:
    cfg.root.mkdir(parents=True, exist_ok=True)
    c = cfg.corpus
    if c.external:
        sentences = load_external_corpus(_require(Path(c.external), "external corpus", "corpus"),
                                         schema_for(cfg))
        if not sentences:
            raise CorpusError(f"external corpus {c.external} has no usable sentences")
        docs = [[s.text] for s in sentences]
    else:
        sentences = generate_corpus(corpus_spec(cfg))
        docs = generate_documents(corpus_spec(cfg, c.document_marker_rate), c.documents,
                                  seed=c.seed + 1, min_sentences=c.document_min_sentences,
                                  max_sentences=c.document_max_sentences, palette=c.palette)
    write_corpus(cfg.path("corpus"), sentences)
    # one document per line, sentences separated by tabs
    cfg.path("documents").write_text("".join("\t".join(d) + "\n" for d in docs), encoding="utf-8")
    vocab = build_vocab([[s.text for s in sentences], [" ".join(d) for d in docs],
                         cfg.eval.prefixes, DEFAULT_PREFIXES])
    vocab.save(cfg.path("vocab"))
    log.info("corpus: %d labelled sentences, %d documents, vocabulary %d", len(sentences), len(docs), len(vocab))
    return {"sentences": len(sentences), "documents": len(docs), "vocab_size": len(vocab),
            "corpus_digest": corpus_digest(sentences), "vocab_digest": vocab.digest()}


def cmd_pretrain(cfg: RunConfig) -> dict:
    vocab = load_vocab(cfg)
    path = _require(cfg.path("documents"), "pretraining documents", "corpus")
    docs = [line.split("\t") for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    # every sentence is wrapped in BOS/EOS; a document stays contiguous so later
    # sentences still see the earlier ones
    seqs = [[t for sent in d for t in encode(sent, vocab, wrap=True)] for d in docs]
    m = cfg.model
    model = LanguageModel(ModelConfig(len(vocab), m.d_emb, m.n_layers, m.n_heads, m.d_ff,
                                      m.max_positions, m.dropout_rate), seed=m.seed)
    p = cfg.pretrain
    history = pretrain_lm(model, seqs, epochs=p.epochs, batch_size=p.batch_size, lr=p.lr,
                          seed=p.seed, window=p.window)
    digest = model.save(cfg.path("model"))
    log.info("pretrain: %d parameters, final loss %s", model.num_parameters(),
             f"{history[-1]:.4f}" if history else "n/a")
    return {"loss": history, "model_digest": digest, "parameters": model.num_parameters()}


def cmd_train_prompt(cfg: RunConfig, attributes: list[tuple[str, str]] | None = None) -> dict:
    model = load_model(cfg)
    vocab = load_vocab(cfg)
    corpus = load_corpus(cfg)
    schema = schema_for(cfg)
    all_attrs = schema.attributes()
    attributes = all_attrs if not attributes else attributes
    path = cfg.path("prompts")
    store = PromptStore(model.digest())
    if path.exists():
        try:
            store = PromptStore.load(path, model)
        except IncompatibleStoreError:
            log.warning("%s belongs to another base model; starting a new store", path)
    p = cfg.prompt
    logs = {}
    for fam, value in attributes:
        if (fam, value) not in all_attrs:
            raise ValueError(f"unknown attribute {fam}={value}")
        data = [s for s in corpus if s.labels.get(fam) == value]
        if not data:
            raise CorpusError(f"corpus has no sentences labelled {fam}={value}")
        seed = p.seed + all_attrs.index((fam, value))
        prompt = init_prompt(fam, value, p.length, model.d_emb, seed=seed)
        prompt.metadata["corpus_digest"] = corpus_digest(data)
        trained, history = train_single_prompt(model, prompt, data, vocab, epochs=p.epochs,
                                               batch_size=p.batch_size, lr=p.lr, seed=seed)
        store.add(trained)
        logs[f"{fam}={value}"] = history
        log.info("prompt %s=%s: loss %.4f -> %.4f", fam, value, history[0] if history else float("nan"),
                 history[-1] if history else float("nan"))
    digest = store.save(path)
    return {"loss": logs, "store_digest": digest}


def cmd_train_classifiers(cfg: RunConfig) -> dict:
    vocab = load_vocab(cfg)
    corpus = load_corpus(cfg)
    schema = schema_for(cfg)
    c = cfg.classifier
    out = {}
    for fam in schema.names:
        clf = train_attribute_classifier(fam, corpus, vocab, classes=schema.family(fam).values,
                                         epochs=c.epochs, lr=c.lr, seed=c.seed,
                                         held_out_fraction=c.held_out_fraction)
        clf.save(classifier_path(cfg, fam))
        out[fam] = clf.metadata["held_out_accuracy"]
    return {"held_out_accuracy": out}


def cmd_train_connector(cfg: RunConfig, held_out: list[tuple[str, str]] | None = None,
                        output: Path | None = None) -> dict:
    model = load_model(cfg)
    vocab = load_vocab(cfg)
    corpus = load_corpus(cfg)
    store = load_store(cfg, model)
    classifiers = load_classifiers(cfg)
    c = cfg.connector
    conn, history = train_connector(
        model, store, classifiers, corpus, vocab, schema_for(cfg), pseudo_mode=c.pseudo_mode,
        length=c.length, epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, seed=c.seed,
        held_out_pair=tuple(held_out) if held_out else None, use_mask=c.use_mask, use_rp=c.use_rp,
    )
    conn.metadata["corpus_digest"] = corpus_digest(corpus)
    conn.save(output or cfg.path("connector"))
    return {"loss": history, "connector_digest": conn.digest()}


def generation_plan(cfg: RunConfig, model: LanguageModel, store: PromptStore,
                    attributes: list[tuple[str, str]], mode: str | None,
                    connector: Connector | None = None, use_mask=None, use_rp=None) -> CompositionPlan:
    if len(attributes) == 1:
        return CompositionPlan([store[attributes[0]].matrix], prompts=1)
    if len(attributes) != 2:
        raise ValueError("generation takes one or two attributes")
    mode = Mode(mode or Mode.MASK_RP)
    if mode is Mode.CONNECTOR and connector is None:
        connector = load_connector(cfg, model)
    return make_plan(store, attributes, mode, connector=connector, use_mask=use_mask, use_rp=use_rp)


def generate_run(cfg: RunConfig, model, store, vocab, attributes, mode, connector=None,
                 seed: int | None = None, use_mask=None, use_rp=None) -> GenerationRun:
    plan = generation_plan(cfg, model, store, attributes, mode, connector, use_mask, use_rp)
    label = "single" if len(attributes) == 1 else Mode(mode or Mode.MASK_RP).value
    run = run_generation(model, plan, vocab, attributes, cfg.eval.prefixes, cfg.eval.samples_per_prefix,
                         decode_config(cfg, seed), mode=label)
    if label == Mode.MASK_RP.value and plan.use_mask and plan.use_rp:
        # the layout is order-free, so the dump names the pair in schema order;
        # decoding above still used the order the caller gave
        names = schema_for(cfg).names
        run.attributes = sorted(run.attributes, key=lambda a: names.index(a[0]))
    run.metadata.update(model_digest=model.digest(), store_digest=store.digest(),
                        use_mask=plan.use_mask, use_rp=plan.use_rp)
    if connector is not None and label == Mode.CONNECTOR.value:
        run.metadata["connector_digest"] = connector.digest()
    return run


def dump_name(attributes, mode: str) -> str:
    return mode + "__" + "__".join(f"{f}={v}" for f, v in attributes) + ".txt"


def cmd_generate(cfg: RunConfig, attributes: list[tuple[str, str]], mode: str | None,
                 output: Path | None = None, connector_path: Path | None = None) -> Path:
    model = load_model(cfg)
    vocab = load_vocab(cfg)
    store = load_store(cfg, model)
    connector = None
    if mode == Mode.CONNECTOR.value and len(attributes) == 2:
        connector = load_connector(cfg, model, connector_path)
    run = generate_run(cfg, model, store, vocab, attributes, mode, connector)
    path = output or cfg.path("dumps") / dump_name(attributes, run.mode)
    write_dump(path, run)
    log.info("generate: %d sentences (%d truncated) -> %s", len(run.sentences), run.truncated, path)
    return path


def judge_for(cfg: RunConfig, vocab: Vocab):
    if cfg.eval.judge == "classifier":
        return classifier_judge(load_classifiers(cfg), vocab)
    return oracle_judge(schema_for(cfg))


def metrics(sentences, attributes, judge, scorer, vocab) -> dict:
    corr = eval_correctness(sentences, attributes, judge)
    return {
        "correctness": corr,
        "correctness_avg": float(np.mean(list(corr.values()))),
        "ppl": eval_ppl(sentences, scorer, vocab) if scorer is not None else None,
        "dist1": eval_distinct(sentences, 1),
        "dist2": eval_distinct(sentences, 2),
        "dist3": eval_distinct(sentences, 3),
        "n_sentences": len(sentences),
    }


def cmd_eval(cfg: RunConfig, dump: Path, output: Path | None = None) -> dict:
    header, sentences = read_dump(_require(Path(dump), "generation dump", "generate"))
    attributes = parse_attributes(header.get("attributes", ""))
    vocab = load_vocab(cfg)
    scorer = None
    if cfg.eval.ppl and cfg.path("model").exists():
        scorer = load_model(cfg)
    report = {"dump": header, "metrics": metrics(sentences, attributes, judge_for(cfg, vocab), scorer, vocab),
              "config": cfg.to_dict()}
    path = output or cfg.report_dir / (Path(dump).stem + ".json")
    emit_report(report, path)
    log.info("eval: correctness %s -> %s", report["metrics"]["correctness"], path)
    return report


# ---------------------------------------------------------------------------
# full pipeline


def evaluate_grid(cfg: RunConfig, model, store, vocab, connector, judge, seed: int | None = None,
                  modes=("concat", "mask-rp", "connector"), scorer=None) -> dict:
    """Correctness and quality for every cross-family pair under each mode."""
    grid = {}
    for mode in modes:
        rows = []
        for pair in schema_for(cfg).pairs():
            run = generate_run(cfg, model, store, vocab, list(pair), mode,
                               connector if mode == "connector" else None, seed=seed)
            row = {"attributes": ",".join(f"{f}={v}" for f, v in pair)}
            row.update(metrics(run.sentences, run.attributes, judge, scorer, vocab))
            row["truncated"] = run.truncated
            rows.append(row)
        grid[mode] = {"pairs": rows, "average": grid_summary(rows)}
    return grid


def cmd_pipeline(cfg: RunConfig, timings: dict | None = None) -> dict:
    """Run every stage.  Wall-clock seconds per stage go to ``timings`` (never into the report)."""
    timings = {} if timings is None else timings
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    report: dict = {"config": cfg.to_dict()}
    report["corpus"] = cmd_corpus(cfg)
    lap("corpus")
    report["pretrain"] = cmd_pretrain(cfg)
    lap("pretrain")
    report["prompts"] = cmd_train_prompt(cfg)
    lap("prompts")
    report["classifiers"] = cmd_train_classifiers(cfg)
    lap("classifiers")
    report["connector"] = cmd_train_connector(cfg)
    lap("connector")

    model = load_model(cfg)
    vocab = load_vocab(cfg)
    store = load_store(cfg, model)
    connector = load_connector(cfg, model)
    judge = judge_for(cfg, vocab)
    scorer = model if cfg.eval.ppl else None
    singles = []
    for attr in schema_for(cfg).attributes():
        run = generate_run(cfg, model, store, vocab, [attr], None)
        write_dump(cfg.path("dumps") / dump_name([attr], "single"), run)
        row = {"attributes": f"{attr[0]}={attr[1]}"}
        row.update(metrics(run.sentences, run.attributes, judge, scorer, vocab))
        singles.append(row)
    report["single"] = singles
    lap("single")
    report["grid"] = evaluate_grid(cfg, model, store, vocab, connector, judge, scorer=scorer)
    lap("grid")
    report["digests"] = {
        "corpus": report["corpus"]["corpus_digest"],
        "vocab": vocab.digest(),
        "model": model.digest(),
        "prompts": store.digest(),
        "connector": connector.digest(),
    }
    emit_report(report, cfg.report_dir / "pipeline.json")
    return report


# ---------------------------------------------------------------------------
# argument handling


def _attrs(text: str | None):
    return parse_attributes(text) if text else None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for this command's stage")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="promptmix", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("corpus", parents=[common], help="generate the labelled corpus, documents and vocabulary")
    sub.add_parser("pretrain", parents=[common], help="train the base language model")
    tp = sub.add_parser("train-prompt", parents=[common], help="train attribute prompts")
    tp.add_argument("--attributes", help="FAMILY=VALUE[,FAMILY=VALUE...] (default: all)")
    sub.add_parser("train-classifiers", parents=[common], help="train per-family attribute classifiers")
    tc = sub.add_parser("train-connector", parents=[common], help="train the connector")
    tc.add_argument("--pseudo-mode", choices=["argmax", "weighted"])
    tc.add_argument("--held-out", help="FAMILY=VALUE,FAMILY=VALUE pair to exclude")
    tc.add_argument("--output", type=Path)
    g = sub.add_parser("generate", parents=[common], help="sample continuations of the evaluation prefixes")
    g.add_argument("--attributes", required=True)
    g.add_argument("--mode", choices=[m.value for m in Mode])
    g.add_argument("--strategy", choices=["greedy", "top-k"])
    g.add_argument("--connector", type=Path)
    g.add_argument("--output", type=Path)
    e = sub.add_parser("eval", parents=[common], help="score a generation dump")
    e.add_argument("dump", type=Path)
    e.add_argument("--output", type=Path)
    sub.add_parser("pipeline", parents=[common], help="run every stage and emit the grid report")
    return p


_SEED_SECTION = {
    "corpus": ["corpus"],
    "pretrain": ["pretrain"],
    "train-prompt": ["prompt"],
    "train-classifiers": ["classifier"],
    "train-connector": ["connector"],
    "generate": ["decode"],
    "eval": [],
    "pipeline": ["corpus", "model", "pretrain", "prompt", "classifier", "connector", "decode"],
}


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load_config(args.config)
    for item in args.set:
        cfg = cfgmod.apply_override(cfg, item)
    if args.seed is not None:
        for section in _SEED_SECTION[args.command]:
            getattr(cfg, section).seed = args.seed
    if getattr(args, "pseudo_mode", None):
        cfg.connector.pseudo_mode = args.pseudo_mode
    if getattr(args, "strategy", None):
        cfg.decode.strategy = args.strategy
    cfgmod.validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "corpus":
            out = cmd_corpus(cfg)
        elif args.command == "pretrain":
            out = cmd_pretrain(cfg)
        elif args.command == "train-prompt":
            out = cmd_train_prompt(cfg, _attrs(args.attributes))
        elif args.command == "train-classifiers":
            out = cmd_train_classifiers(cfg)
        elif args.command == "train-connector":
            out = cmd_train_connector(cfg, _attrs(args.held_out), args.output)
        elif args.command == "generate":
            out = {"dump": str(cmd_generate(cfg, _attrs(args.attributes), args.mode, args.output, args.connector))}
        elif args.command == "eval":
            out = cmd_eval(cfg, args.dump, args.output)["metrics"]
        else:
            report = cmd_pipeline(cfg)
            out = {mode: g["average"]["correctness_avg"] for mode, g in report["grid"].items()}
    except (MissingArtifactError, ConfigError, CorpusError, ContainerError, IncompatibleStoreError,
            ValueError, KeyError) as e:
        print(f"promptmix {args.command}: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(out, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
