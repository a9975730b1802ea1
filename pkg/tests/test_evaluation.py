import json
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptmix.corpus import ABSTAIN, Vocab, default_schema
from promptmix.decoding import DecodeConfig, Strategy
from promptmix.evaluation import (
    classifier_judge,
    emit_report,
    eval_correctness,
    eval_distinct,
    eval_ppl,
    evaluate_run,
    grid_summary,
    oracle_judge,
    parse_attributes,
    read_dump,
    run_generation,
    write_dump,
)
from promptmix.model import LanguageModel, pretrain_lm

from conftest import tiny_config


def brute_distinct(sentences, n):
    """Independent recount: every n-gram of every sentence, deduplicated by string key."""
    seen = {}
    words = 0
    for s in sentences:
        toks = s.split()
        words += len(toks)
        for i in range(len(toks)):
            if i + n <= len(toks):
                seen["\x00".join(toks[i : i + n])] = True
    return len(seen) / words


# ---------------------------------------------------------------- correctness


FOUR = [
    "the tacos here was great .",
    "the sushi here was great .",
    "the food here was great .",
    "we loved it and it was lovely .",
]


def test_correctness_three_of_four():
    judge = oracle_judge(default_schema())
    assert eval_correctness(FOUR, [("SENTIMENT", "POS")], judge) == {"SENTIMENT": 1.0}
    wrong_last = FOUR[:3] + ["the tacos here was awful ."]
    assert eval_correctness(wrong_last, [("SENTIMENT", "POS")], judge)["SENTIMENT"] == 0.75


def test_correctness_per_family():
    judge = oracle_judge(default_schema())
    out = eval_correctness(FOUR, [("SENTIMENT", "POS"), ("TOPIC", "MEX")], judge)
    assert out == {"SENTIMENT": 1.0, "TOPIC": 0.25}


def test_all_abstain_counts_wrong():
    judge = oracle_judge(default_schema())
    texts = ["nothing to see", "great and awful", "tacos and sushi"]
    assert eval_correctness(texts, [("SENTIMENT", "POS")], judge)["SENTIMENT"] == 0.0
    assert judge("great and awful")["SENTIMENT"] == ABSTAIN


def test_correctness_empty_run():
    with pytest.raises(ValueError):
        eval_correctness([], [("SENTIMENT", "POS")], oracle_judge(default_schema()))


@given(st.permutations(FOUR + ["the tacos here was awful ."]))
def test_correctness_order_invariant(sentences):
    judge = oracle_judge(default_schema())
    assert eval_correctness(sentences, [("SENTIMENT", "POS"), ("TOPIC", "MEX")], judge) == {
        "SENTIMENT": 0.8, "TOPIC": 0.4}


# ---------------------------------------------------------------- distinct n-grams


def test_distinct_hand_counts():
    assert eval_distinct(["a a b"], 1) == pytest.approx(2 / 3, abs=0)
    assert eval_distinct(["a b c"], 2) == pytest.approx(2 / 3, abs=0)
    assert eval_distinct(["a b", "a b"], 2) == 1 / 4


def fixture_sentences(seed, n):
    rng = random.Random(seed)
    words = "a b c d e f g the of and".split()
    return [" ".join(rng.choice(words) for _ in range(rng.randint(1, 12))) for _ in range(n)]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_distinct_matches_brute_force(seed):
    sentences = fixture_sentences(seed, 100)
    for n in (1, 2, 3):
        assert eval_distinct(sentences, n) == brute_distinct(sentences, n)


@given(st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8).map(" ".join), min_size=1, max_size=10),
       st.integers(1, 3))
def test_distinct_property(sentences, n):
    d = eval_distinct(sentences, n)
    assert d == brute_distinct(sentences, n)
    assert 0 <= d <= 1


# ---------------------------------------------------------------- perplexity


def test_uniform_scorer_ppl():
    vocab = Vocab(["<pad>", "<unk>", "<bos>", "<eos>"])
    m = LanguageModel(tiny_config(vocab_size=4), seed=0)
    m.params["tok_emb"].data[:] = 0.0
    assert eval_ppl(["", "x y"], m, vocab) == pytest.approx(4.0, abs=1e-9)


def test_memorised_sentence_ppl():
    vocab = Vocab(["<pad>", "<unk>", "<bos>", "<eos>", "the", "tacos", "were", "great", "."])
    text = "the tacos were great ."
    m = LanguageModel(tiny_config(vocab_size=len(vocab)), seed=0)
    pretrain_lm(m, [[2, 4, 5, 6, 7, 8, 3]], epochs=60, batch_size=1, lr=1e-2)
    assert eval_ppl([text], m, vocab) < 1.5


def test_ppl_vocab_mismatch():
    vocab = Vocab(["<pad>", "<unk>", "<bos>", "<eos>", "x"])
    with pytest.raises(ValueError):
        eval_ppl(["x"], LanguageModel(tiny_config(), seed=0), vocab)


# ---------------------------------------------------------------- runs, dumps, reports


def small_run(tmp_path=None):
    vocab = Vocab(["<pad>", "<unk>", "<bos>", "<eos>", "the", "tacos", "sushi", "great", "awful", ".", "was", "x"])
    m = LanguageModel(tiny_config(vocab_size=len(vocab)), seed=4)
    cfg = DecodeConfig(Strategy.TOP_K, k=3, seed=42, max_new_tokens=6)
    run = run_generation(m, None, vocab, [("SENTIMENT", "POS")], ["the", "the tacos"], 4, cfg)
    return m, vocab, run


def test_run_generation_counts_and_seeds():
    _, _, run = small_run()
    assert len(run.sentences) + run.truncated == 8
    assert all(s.startswith("the") for s in run.sentences)
    _, _, again = small_run()
    assert again.sentences == run.sentences


def test_greedy_run_has_one_sample_per_prefix():
    vocab = Vocab(["<pad>", "<unk>", "<bos>", "<eos>", "the", "x"])
    m = LanguageModel(tiny_config(vocab_size=len(vocab)), seed=4)
    run = run_generation(m, None, vocab, [], ["the", "x"], 20, DecodeConfig(Strategy.GREEDY, max_new_tokens=3))
    assert len(run.sentences) == 2


def test_dump_round_trip(tmp_path):
    _, _, run = small_run()
    write_dump(tmp_path / "d.txt", run)
    header, sentences = read_dump(tmp_path / "d.txt")
    assert sentences == run.sentences
    assert header["mode"] == "single"
    assert header["attributes"] == "SENTIMENT=POS"
    assert header["decode"]["seed"] == 42


def test_report_bytes_are_reproducible(tmp_path):
    reports = []
    for i in range(2):
        m, vocab, run = small_run()
        metrics = evaluate_run(run, oracle_judge(default_schema()), m, vocab)
        reports.append(emit_report({"run": run.header(), "metrics": metrics}, tmp_path / f"r{i}.json"))
    assert reports[0] == reports[1]
    parsed = json.loads((tmp_path / "r0.json").read_text())
    assert list(parsed["metrics"]) == ["correctness", "correctness_avg", "ppl", "dist1", "dist2", "dist3",
                                       "n_sentences"]


def test_report_cleans_non_finite(tmp_path):
    data = emit_report({"a": float("nan"), "b": np.float64(1.5), "c": (1, 2)}, tmp_path / "r.json")
    assert json.loads(data) == {"a": None, "b": 1.5, "c": [1, 2]}


def test_grid_summary_six_rows():
    rows = [{"correctness": {"SENTIMENT": 1.0, "TOPIC": t}, "correctness_avg": (1 + t) / 2,
             "ppl": 10.0, "dist1": 0.1, "dist2": 0.2, "dist3": 0.3} for t in (0, 0.2, 0.4, 0.6, 0.8, 1.0)]
    out = grid_summary(rows)
    assert out["correctness"] == {"SENTIMENT": 1.0, "TOPIC": pytest.approx(0.5)}
    assert out["correctness_avg"] == pytest.approx(0.75)


def test_parse_attributes():
    assert parse_attributes("SENTIMENT=POS, TOPIC=MEX") == [("SENTIMENT", "POS"), ("TOPIC", "MEX")]
    with pytest.raises(ValueError):
        parse_attributes("SENTIMENT")


def test_classifier_judge_uses_predictions():
    class Fixed:
        def predict(self, text, vocab):
            return "POS" if "great" in text else "NEG"

    judge = classifier_judge({"SENTIMENT": Fixed()}, None)
    assert eval_correctness(FOUR, [("SENTIMENT", "POS")], judge)["SENTIMENT"] == 0.75
