"""Acceptance checks, one test per criterion, run against the default configuration.

The default pipeline is run twice in a session fixture (about 8-9 minutes
each on one CPU core); the ordering criteria then train two more connectors
and three held-out connectors on top of those artifacts.  Every test records
a PASS/FAIL line that is printed at the end of the session.
"""

import copy
import json
import os
import shutil
import time

import mpmath
import numpy as np
import pytest

from promptmix import cli
from promptmix import numeric as nm
from promptmix.composition import pseudo_prompt_argmax, pseudo_prompt_weighted
from promptmix.config import REPORT_DIR_ENV, RunConfig
from promptmix.corpus import Vocab, default_schema, encode
from promptmix.evaluation import eval_correctness, eval_distinct, eval_ppl, oracle_judge
from promptmix.model import LanguageModel, ModelConfig, text_input
from promptmix.numeric import Tensor

from conftest import record_acceptance

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
DECODE_SEED_STRIDE = 100  # decode seed for seed s is base + 100 * s; per-prefix offsets stay disjoint


def mean(xs):
    return float(np.mean(list(xs)))


# ---------------------------------------------------------------- shared fixtures


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Two runs of the default pipeline in the same workdir."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = RunConfig(workdir=str(root / "work"))
    saved = os.environ.pop(REPORT_DIR_ENV, None)
    try:
        runs = []
        for _ in range(2):
            timings = {}
            start = time.perf_counter()
            report = cli.cmd_pipeline(cfg, timings)
            elapsed = time.perf_counter() - start
            runs.append({"report": report, "bytes": (cfg.report_dir / "pipeline.json").read_bytes(),
                         "seconds": elapsed, "timings": timings})
    finally:
        if saved is not None:
            os.environ[REPORT_DIR_ENV] = saved
    return cfg, runs


@pytest.fixture(scope="session")
def artifacts(pipeline):
    cfg, runs = pipeline
    model = cli.load_model(cfg)
    vocab = cli.load_vocab(cfg)
    store = cli.load_store(cfg, model)
    return {
        "cfg": cfg,
        "report": runs[0]["report"],
        "model": model,
        "vocab": vocab,
        "store": store,
        "connector": cli.load_connector(cfg, model),
        "classifiers": cli.load_classifiers(cfg),
        "judge": cli.judge_for(cfg, vocab),
        "pairs": [list(p) for p in default_schema().pairs()],
    }


def with_seed(cfg: RunConfig, s: int) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.connector.seed = cfg.connector.seed + s
    out.decode.seed = cfg.decode.seed + DECODE_SEED_STRIDE * s
    return out


def pair_correctness(a, cfg, attrs, mode, connector=None, **kw):
    run = cli.generate_run(cfg, a["model"], a["store"], a["vocab"], attrs, mode, connector, **kw)
    corr = eval_correctness(run.sentences, run.attributes, a["judge"])
    return mean(corr.values())


# ---------------------------------------------------------------- 1. gradient fidelity


def _rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def _fd_entries(f, x, idx, h=1e-5):
    out = []
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + h
        up = f()
        x.flat[i] = old - h
        down = f()
        x.flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def _primitive_errors(rng):
    errs = []

    def check(build, inputs):
        ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
        nm.backward(build(*ts))
        for i, t in enumerate(ts):
            def f(x, i=i):
                args = [Tensor(v) for v in inputs]
                args[i] = Tensor(x)
                return build(*args).item()

            errs.append(_rel(t.grad, nm.finite_difference_gradient(f, inputs[i], 1e-5)))

    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 3, 4))
    w5 = rng.normal(size=(2, 3, 5))
    bias = np.where(rng.random((3, 4)) < 0.3, -np.inf, 0.0)
    bias[:, 0] = 0.0
    targets = rng.integers(0, 4, (2, 3))
    ignore = rng.random((2, 3)) < 0.3
    ignore[0, 0] = False
    rows = rng.integers(0, 5, (2, 3))
    check(lambda a, b: nm.sum_all(nm.mul(nm.matmul(a, b), w5)), [x, rng.normal(size=(4, 5))])
    check(lambda t: nm.sum_all(nm.mul(nm.softmax_rows_with_bias(t, bias), w)), [x])
    check(lambda t, g, s: nm.sum_all(nm.mul(nm.layer_norm(t, g, s), w)),
          [x, rng.normal(size=4), rng.normal(size=4)])
    check(lambda t: nm.sum_all(nm.mul(nm.gelu(t), w)), [x])
    check(lambda t: nm.cross_entropy_next_token(t, targets, ignore), [x])
    check(lambda t: nm.sum_all(nm.mul(nm.transpose(t, (2, 0, 1)), np.transpose(w, (2, 0, 1)))), [x])
    check(lambda a, b: nm.mean_all(nm.mul(nm.sub(a, b), nm.add(a, b))), [x, rng.normal(size=(4,))])
    check(lambda t: nm.sum_all(nm.mul(nm.take_rows(t, rows), w)), [rng.normal(size=(5, 4))])
    return errs


def _model_errors(rng, trial):
    m = LanguageModel(ModelConfig(vocab_size=9, d_emb=16, n_layers=2, n_heads=2, d_ff=32, max_positions=8),
                      seed=trial)
    for p in m.parameters():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    ids = rng.integers(1, 9, (2, 6))
    ignore = np.zeros((2, 5), dtype=bool)
    ignore[1, -1] = True

    def loss():
        return nm.cross_entropy_next_token(m(text_input(m, ids[:, :-1])), ids[:, 1:], ignore)

    nm.backward(loss())
    errs = []
    for p in m.parameters():
        idx = rng.choice(p.data.size, size=min(6, p.data.size), replace=False)
        fd = _fd_entries(lambda: loss().item(), p.data, idx)
        errs.append(_rel(p.grad.flat[idx], fd))
    return errs


def test_c01_gradient_fidelity():
    start = time.perf_counter()
    worst_prim = worst_model = 0.0
    trials = 20
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial)
        worst_prim = max(worst_prim, max(_primitive_errors(rng)))
        worst_model = max(worst_model, max(_model_errors(rng, trial)))
    elapsed = time.perf_counter() - start
    ok = worst_prim <= 1e-4 and worst_model <= 1e-4 and elapsed < 120
    record_acceptance(1, "gradient fidelity", ok,
                      f"{trials} trials, worst rel err primitives {worst_prim:.2e}, model {worst_model:.2e}, "
                      f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. frozen base


def test_c02_frozen_base(pipeline, tmp_path):
    cfg, runs = pipeline
    report = runs[0]["report"]
    pretrained = report["pretrain"]["model_digest"]
    after_all = report["digests"]["model"]

    # an extra prompt run and an extra connector run in a scratch copy of the workdir
    scratch = copy.deepcopy(cfg)
    scratch.workdir = str(tmp_path / "scratch")
    shutil.copytree(cfg.root, scratch.root, ignore=shutil.ignore_patterns("dumps", "reports"))
    file_before = cli.load_model(scratch).digest()
    scratch.prompt.epochs = 2
    cli.cmd_train_prompt(scratch, [("TOPIC", "MEX")])
    after_prompt = cli.load_model(scratch).digest()
    scratch.connector.epochs = 1
    cli.cmd_train_connector(scratch)
    after_connector = cli.load_model(scratch).digest()
    ok = pretrained == after_all == file_before == after_prompt == after_connector
    record_acceptance(2, "frozen base", ok,
                      f"model digest {pretrained[:12]} unchanged after prompt and connector training")
    assert ok


# ---------------------------------------------------------------- 3. mask exactness


def test_c03_mask_exactness(artifacts):
    a = artifacts
    worst = 0.0
    checked = 0
    for pair in a["pairs"]:
        plan = cli.generation_plan(a["cfg"], a["model"], a["store"], pair, "mask-rp")
        l_u, l_v = plan.lengths()[:2]
        ids = [2] + encode(a["cfg"].eval.prefixes[0], a["vocab"])
        probe = []
        a["model"](plan.forward_input(a["model"], ids), probe=probe)
        for att in probe:
            block = att[..., l_u : l_u + l_v, :l_u]
            worst = max(worst, float(np.abs(block).max()))
            checked += block.size
    ok = worst == 0.0
    record_acceptance(3, "mask exactness", ok,
                      f"{checked} second-prompt to first-prompt attention probabilities, max {worst!r}")
    assert ok


# ---------------------------------------------------------------- 4. swap invariance


def test_c04_swap_invariance(artifacts):
    a = artifacts
    start = time.perf_counter()
    greedy = copy.deepcopy(a["cfg"])
    greedy.decode.strategy = "greedy"
    worst_logit = 0.0
    mask_rp_same = True
    concat_differs = 0
    for pair in a["pairs"]:
        swapped = pair[::-1]
        ids = [2] + encode(greedy.eval.prefixes[0], a["vocab"])
        plans = [cli.generation_plan(greedy, a["model"], a["store"], p, "mask-rp") for p in (pair, swapped)]
        start_row = plans[0].prefix_length
        logits = [a["model"](p.forward_input(a["model"], ids)).data[start_row:] for p in plans]
        worst_logit = max(worst_logit, float(np.abs(logits[0] - logits[1]).max()))
        for mode in ("mask-rp", "concat"):
            runs = [cli.generate_run(greedy, a["model"], a["store"], a["vocab"], p, mode) for p in (pair, swapped)]
            same = runs[0].sentences == runs[1].sentences
            if mode == "mask-rp":
                mask_rp_same &= same
            else:
                concat_differs += not same
    elapsed = time.perf_counter() - start
    ok = worst_logit <= 1e-9 and mask_rp_same and concat_differs >= 1 and elapsed < 300
    record_acceptance(4, "swap invariance", ok,
                      f"MASK_RP max |dlogit| {worst_logit:.1e}, greedy dumps identical {mask_rp_same}; "
                      f"CONCAT differs on {concat_differs}/6 pairs; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5. single-attribute control


def test_c05_single_attribute_control(pipeline):
    _, runs = pipeline
    report, timings = runs[0]["report"], runs[0]["timings"]
    scores = {row["attributes"]: row["correctness_avg"] for row in report["single"]}
    counts = {row["attributes"]: row["n_sentences"] for row in report["single"]}
    seconds = timings["prompts"] + timings["single"]
    ok = len(scores) == 5 and min(scores.values()) >= 0.90 and seconds < 600
    detail = ", ".join(f"{k} {v:.3f} (n={counts[k]})" for k, v in scores.items())
    record_acceptance(5, "single-attribute control", ok, f"{detail}; prompts+generation {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------- 6. multi-attribute ordering


@pytest.fixture(scope="session")
def seeded_grids(artifacts, tmp_path_factory):
    """Grid averages for the three seeds; seed 0 is the pipeline's own grid."""
    a = artifacts
    root = tmp_path_factory.mktemp("seeds")
    out = {0: {m: g["average"]["correctness_avg"] for m, g in a["report"]["grid"].items()}}
    for s in SEEDS[1:]:
        cfg = with_seed(a["cfg"], s)
        path = root / f"connector-{s}.bin"
        cli.cmd_train_connector(cfg, output=path)
        connector = cli.load_connector(cfg, a["model"], path)
        grid = cli.evaluate_grid(cfg, a["model"], a["store"], a["vocab"], connector, a["judge"])
        out[s] = {m: g["average"]["correctness_avg"] for m, g in grid.items()}
    return out


def test_c06_multi_attribute_ordering(seeded_grids):
    avg = {m: mean(seeded_grids[s][m] for s in SEEDS) for m in ("connector", "mask-rp", "concat")}
    ok = (avg["connector"] >= avg["mask-rp"] >= avg["concat"]
          and avg["connector"] - avg["concat"] >= 0.03)
    per_seed = "; ".join(f"seed {s}: " + " ".join(f"{m} {v:.3f}" for m, v in seeded_grids[s].items())
                         for s in SEEDS)
    record_acceptance(6, "multi-attribute ordering", ok,
                      f"connector {avg['connector']:.3f} >= mask-rp {avg['mask-rp']:.3f} >= concat "
                      f"{avg['concat']:.3f} (gap {avg['connector'] - avg['concat']:.3f}) [{per_seed}]")
    assert ok


# ---------------------------------------------------------------- 7. ablation direction


def test_c07_ablation_direction(artifacts):
    a = artifacts
    full = a["report"]["grid"]["mask-rp"]["average"]["correctness_avg"]
    ablated = {}
    for name, kw in (("no mask", dict(use_mask=False)), ("no rp", dict(use_rp=False)),
                     ("neither", dict(use_mask=False, use_rp=False))):
        ablated[name] = mean(pair_correctness(a, a["cfg"], p, "mask-rp", **kw) for p in a["pairs"])
    ok = all(v <= full for v in ablated.values())
    record_acceptance(7, "ablation direction", ok,
                      f"full {full:.3f}; " + ", ".join(f"{k} {v:.3f}" for k, v in ablated.items()))
    assert ok


# ---------------------------------------------------------------- 8. pseudo-prompt algebra


def test_c08_pseudo_prompt_algebra(artifacts):
    a = artifacts
    store = a["store"]
    rng = np.random.default_rng(8)
    exact = True
    worst = 0.0
    for fam, clf in a["classifiers"].items():
        n = len(clf.classes)
        for z in range(n):
            onehot = np.eye(n)[z]
            exact &= np.array_equal(pseudo_prompt_weighted(onehot, clf, store),
                                    pseudo_prompt_argmax(onehot, clf, store).matrix)
        for _ in range(10):
            p = rng.dirichlet(np.ones(n))
            got = pseudo_prompt_weighted(p, clf, store)
            mats = [store[(fam, c)].matrix for c in clf.classes]
            for (i, j), _ in np.ndenumerate(got):
                ref = mpmath.fsum(mpmath.mpf(float(p[z])) * mpmath.mpf(float(mats[z][i, j])) for z in range(n))
                worst = max(worst, abs(float(ref) - got[i, j]))
    ok = exact and worst <= 1e-12
    record_acceptance(8, "pseudo-prompt algebra", ok,
                      f"one-hot weighted == argmax {exact}; random p max deviation {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 9. unseen combination


def test_c09_unseen_combination(artifacts, tmp_path):
    a = artifacts
    held = a["pairs"][0]
    conn_scores, mask_scores = [], []
    for s in SEEDS:
        cfg = with_seed(a["cfg"], s)
        path = tmp_path / f"held-{s}.bin"
        cli.cmd_train_connector(cfg, held_out=held, output=path)
        connector = cli.load_connector(cfg, a["model"], path)
        assert connector.metadata["held_out_pair"] == [list(x) for x in held]
        conn_scores.append(pair_correctness(a, cfg, held, "connector", connector))
        mask_scores.append(pair_correctness(a, cfg, held, "mask-rp"))
    ok = mean(conn_scores) >= mean(mask_scores)
    name = ",".join(f"{f}={v}" for f, v in held)
    record_acceptance(9, "unseen combination", ok,
                      f"held-out {name}: connector {mean(conn_scores):.3f} vs mask-rp {mean(mask_scores):.3f} "
                      f"(per seed {[round(x, 3) for x in conn_scores]} vs {[round(x, 3) for x in mask_scores]})")
    assert ok


# ---------------------------------------------------------------- 10. metric oracles


def _brute_distinct(sentences, n):
    grams = set()
    words = 0
    for s in sentences:
        toks = s.split()
        words += len(toks)
        grams.update(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    return len(grams) / words


def test_c10_metric_oracles():
    rng = np.random.default_rng(10)
    words = "the a tacos sushi was great awful and it .".split()
    fixtures = [[" ".join(rng.choice(words, size=rng.integers(1, 12))) for _ in range(40)] for _ in range(3)]
    dist_ok = all(eval_distinct(f, n) == _brute_distinct(f, n) for f in fixtures for n in (1, 2, 3))

    judge = oracle_judge(default_schema())
    four = ["the tacos here was great .", "the sushi here was great .",
            "the food here was lovely .", "the tacos here was awful ."]
    corr = eval_correctness(four, [("SENTIMENT", "POS"), ("TOPIC", "MEX")], judge)
    corr_ok = corr == {"SENTIMENT": 3 / 4, "TOPIC": 2 / 4}

    vocab = Vocab(["<pad>", "<unk>", "<bos>", "<eos>", "x", "y", "z"])
    m = LanguageModel(ModelConfig(vocab_size=len(vocab), d_emb=8, n_layers=1, n_heads=2, d_ff=16,
                                  max_positions=16), seed=0)
    m.params["tok_emb"].data[:] = 0.0
    ppl = eval_ppl(["x y", "z", "x x x z"], m, vocab)
    ppl_ok = abs(ppl - len(vocab)) <= 1e-9
    ok = dist_ok and corr_ok and ppl_ok
    record_acceptance(10, "metric oracles", ok,
                      f"Dist-1/2/3 exact on 3 fixtures {dist_ok}; correctness {corr}; uniform PPL {ppl!r}")
    assert ok


# ---------------------------------------------------------------- 11. reproducibility


def test_c11_end_to_end_reproducibility(pipeline):
    _, runs = pipeline
    same = runs[0]["bytes"] == runs[1]["bytes"]
    seconds = runs[0]["seconds"]
    ok = same and seconds < 900
    stages = ", ".join(f"{k} {v:.0f}s" for k, v in runs[0]["timings"].items())
    report = json.loads(runs[0]["bytes"])
    record_acceptance(11, "end-to-end reproducibility", ok,
                      f"reports byte-identical {same}; pipeline {seconds:.0f}s ({stages}); "
                      f"{len(report['grid']['connector']['pairs'])} pairs per mode")
    assert ok


# ---------------------------------------------------------------- perplexity directions (not a numbered criterion)

PPL_BAND = (0.5, 2.0)  # MASK_RP perplexity must lie within this factor of the single-prompt mean


def test_ppl_directions(pipeline):
    _, runs = pipeline
    report = runs[0]["report"]
    single = mean(row["ppl"] for row in report["single"])
    grid = {m: g["average"]["ppl"] for m, g in report["grid"].items()}
    ratio = grid["mask-rp"] / single
    print(f"ppl single {single:.2f}, concat {grid['concat']:.2f}, mask-rp {grid['mask-rp']:.2f}, "
          f"connector {grid['connector']:.2f}")
    assert PPL_BAND[0] <= ratio <= PPL_BAND[1]
    assert grid["connector"] <= grid["concat"]
