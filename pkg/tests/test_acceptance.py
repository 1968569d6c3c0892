"""End-to-end acceptance checks.

Each test records one ``[n] PASS|FAIL name: details`` line, printed in the
pytest terminal summary.  The training-based checks share session fixtures:
one default corpus, one seed-42 two-stage run, one reversed-order run and
one five-seed ablation.
"""
import time

import numpy as np
import pytest

from avdetect import autodiff as ad
from avdetect import checkpoint, lora
from avdetect.config import RunConfig
from avdetect.data import FAKE, REAL
from avdetect.metrics import ScoredSample, auc, extract_two_token, mean_average_precision
from avdetect.model import ModelConfig, PromptTemplate, forward_batch, init_params
from avdetect.pipeline import ABLATION_ARMS, ensure_corpus, eval_checkpoint, run_ablation, train_run
from avdetect.training import loss

from conftest import ACCEPTANCE_LINES, tiny_config
from test_autodiff import CASES
from test_metrics import pairwise_auc, rank_walk_map
from test_training import tiny_dataset

ENCODERS = ["audio_encoder", "vision_encoder"]


def record(n: int, name: str, ok: bool, details: str):
    line = f"[{n}] {'PASS' if ok else 'FAIL'} {name}: {details}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- shared training runs ---------------------------------------------------------

@pytest.fixture(scope="session")
def default_config(tmp_path_factory):
    config = RunConfig(out=str(tmp_path_factory.mktemp("acceptance")))
    _, splits = ensure_corpus(config)
    return config, splits


def _run(config, plan):
    start = time.perf_counter()
    result = train_run(config, plan)
    ckpt = f"{result['run_dir']}/stage-2.ckpt"
    report, _ = eval_checkpoint(config, ckpt, out=f"{result['run_dir']}/eval")
    return result, report, time.perf_counter() - start


@pytest.fixture(scope="session")
def two_stage(default_config):
    return _run(default_config[0], "two-stage")


@pytest.fixture(scope="session")
def swapped(default_config):
    return _run(default_config[0], "stage2-first")


@pytest.fixture(scope="session")
def ablation(default_config):
    config, splits = default_config
    return run_ablation(config, splits=splits)


# -- fast checks --------------------------------------------------------------------

def test_gradients_match_finite_differences():
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for make in CASES.values():
        for seed in range(20):
            fn, params = make(np.random.default_rng(seed))
            worst = max(worst, ad.gradcheck(fn, params, h=1e-6))
            cases += 1
    for seed in range(20):
        ds = tiny_dataset(4, seed=seed)
        params = init_params(tiny_config(seed=seed))
        # every tensor of the model, four sampled entries each
        worst = max(worst, ad.gradcheck(lambda: loss(ds, params), list(params.tensors.values()), h=1e-6,
                                        max_entries=4, rng=np.random.default_rng(seed)))
        cases += 1
    elapsed = time.perf_counter() - start
    record(1, "gradient suite", worst <= 1e-4 and elapsed < 60,
           f"{len(CASES)} ops + end-to-end loss, {cases} cases, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_lora_neutral_then_mergeable():
    rng = np.random.default_rng(0)
    base = init_params(ModelConfig(seed=1))
    c = base.config
    audio = rng.standard_normal((100, c.seq_len, c.d_audio_in))
    video = rng.standard_normal((100, c.seq_len, c.d_vision_in))
    prompt = PromptTemplate()
    adapted = lora.attach(base)
    neutral = np.array_equal(forward_batch(audio, video, prompt, base).data,
                             forward_batch(audio, video, prompt, adapted).data)
    for a in adapted.adapters.values():
        a.B.data = 0.1 * rng.standard_normal(a.B.shape)
    diff = np.abs(forward_batch(audio, video, prompt, adapted).data
                  - forward_batch(audio, video, prompt, lora.merge(adapted)).data).max()
    record(2, "LoRA neutrality and merge", neutral and diff <= 1e-9,
           f"fresh adapters bit-identical={neutral}, merged max abs diff {diff:.1e} on 100 inputs")


def _score_set(rng, mode):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[0], labels[-1] = REAL, FAKE
    if mode == "continuous":
        scores = rng.random(n)
    elif mode == "coarse":
        scores = rng.integers(0, 5, n) / 4
    elif mode == "all_ties":
        scores = np.full(n, rng.random())
    elif mode == "perfect":
        scores = np.where(labels == FAKE, 0.5 + 0.5 * rng.random(n), 0.5 * rng.random(n))
    else:
        scores = np.where(labels == FAKE, 0.5 * rng.random(n), 0.5 + 0.5 * rng.random(n))
    ids = rng.permutation(n)
    return [ScoredSample(int(i), int(y), float(p)) for i, y, p in zip(ids, labels, scores)]


def test_metrics_match_oracles():
    rng = np.random.default_rng(2024)
    modes = ["continuous", "coarse", "all_ties", "perfect", "inverted"]
    expected = {"all_ties": 0.5, "perfect": 1.0, "inverted": 0.0}
    auc_err, map_exact, fixed_ok = 0.0, True, True
    for k in range(500):
        mode = modes[k % len(modes)]
        scored = _score_set(rng, mode)
        a = auc(scored)
        auc_err = max(auc_err, abs(a - pairwise_auc(scored)))
        map_exact &= mean_average_precision(scored) == rank_walk_map(scored)
        if mode in expected:
            fixed_ok &= a == expected[mode]
        if mode == "perfect":
            fixed_ok &= mean_average_precision(scored) == 1.0
    record(4, "metric oracles", auc_err <= 1e-12 and map_exact and fixed_ok,
           f"500 sets: max AUC err {auc_err:.1e}, mAP exact={map_exact}, "
           f"ties/perfect/inverted as expected={fixed_ok}")


def test_two_token_extraction_invariances():
    rng = np.random.default_rng(5)
    shift_err, perturb_ok, sums_ok = 0.0, True, True
    for _ in range(1000):
        n = int(rng.integers(3, 64))
        logits = rng.normal(0, 5, n)
        r, f = rng.choice(n, 2, replace=False)
        p_real, p_fake = extract_two_token(logits, r, f)
        sums_ok &= p_real + p_fake == 1.0
        shift_err = max(shift_err, abs(extract_two_token(logits + rng.normal(0, 1e3), r, f)[1] - p_fake))
        other = logits + rng.normal(0, 50, n)
        other[[r, f]] = logits[[r, f]]
        perturb_ok &= extract_two_token(other, r, f) == (p_real, p_fake)
    record(5, "two-token extraction", shift_err <= 1e-12 and perturb_ok and sums_ok,
           f"1000 vectors: shift err {shift_err:.1e}, distractor-invariant={perturb_ok}, "
           f"p_real+p_fake==1 exactly={sums_ok}")


def test_identical_config_reproduces_bit_for_bit(tmp_path):
    base = {"corpus": {"counts": {"train": 256, "in_domain": 128, "open_set_generator": 64,
                                  "open_set_style": 64, "open_set_full": 128}},
            "stage1": {"steps": 8, "batch_size": 16}, "stage2": {"steps": 8, "batch_size": 16}}
    runs = []
    for name in ("a", "b"):
        config = RunConfig.from_dict(base | {"out": str(tmp_path / name)})
        result = train_run(config)
        eval_checkpoint(config, f"{result['run_dir']}/stage-2.ckpt", out=f"{result['run_dir']}/eval")
        runs.append((result["corpus_hash"], result["checkpoints"],
                     open(f"{result['run_dir']}/eval/report.json", "rb").read()))
    (h1, c1, r1), (h2, c2, r2) = runs
    record(9, "determinism", h1 == h2 and c1 == c2 and r1 == r2,
           f"corpus hash equal={h1 == h2}, {len(c1)} checkpoint hashes equal={c1 == c2}, "
           f"report.json bytes equal={r1 == r2}")


# -- training-based checks -----------------------------------------------------------

def test_stage_one_leaves_encoders_untouched(two_stage):
    result, _, _ = two_stage
    run = result["run_dir"]
    plan = RunConfig().stage1
    start, after = checkpoint.load(f"{run}/stage-0.ckpt"), checkpoint.load(f"{run}/stage-1.ckpt")
    same = all(start.digest([g]) == after.digest([g]) for g in ENCODERS)
    moved = start.digest(["embedding"]) != after.digest(["embedding"])
    record(3, "freeze soundness", same and moved and plan.steps >= 200,
           f"{plan.steps} stage-1 steps, encoder hashes identical={same}, other groups trained={moved}")


def test_two_stage_learns_in_domain(two_stage):
    _, report, elapsed = two_stage
    r = report.splits["in_domain"]
    record(6, "end-to-end learnability", r.accuracy >= 0.95 and r.auc >= 0.98 and elapsed <= 600,
           f"seed 42 two-stage in-domain acc {r.accuracy:.4f}, AUC {r.auc:.4f}, {elapsed:.0f}s")


def test_open_set_gap(two_stage, ablation):
    _, report, _ = two_stage
    full_auc = report.splits["open_set_full"].auc
    gaps = [ablation.gap_holds(i) for i in range(len(ablation.seeds))]
    detail = "; ".join(
        f"{arm} in/open {ablation.reference[arm][i]:.3f}/{ablation.accuracy[arm][i]:.3f}"
        for i, seed in enumerate(ablation.seeds) if seed == 42
        for arm, plan in ABLATION_ARMS if plan != "none")
    record(8, "open-set gap", all(gaps) and full_auc >= 0.85,
           f"gap holds per seed {gaps}; seed 42: {detail}; two-stage open-set-full AUC {full_auc:.4f}")


def test_ablation_ordering(ablation):
    table = ", ".join(f"{arm} {np.round(ablation.accuracy[arm], 3).tolist()}" for arm, _ in ABLATION_ARMS)
    record(7, "ablation ordering", ablation.passed(),
           f"seeds {list(ablation.seeds)} verdicts {ablation.verdicts()}; open-set-full acc: {table}")


def test_both_stage_orders_learn(two_stage, swapped):
    _, fwd, _ = two_stage
    _, rev, elapsed = swapped
    a, b = fwd.splits["in_domain"], rev.splits["in_domain"]
    ok = all(r.accuracy >= 0.95 and r.auc >= 0.98 for r in (a, b))
    record(10, "order swap", ok and elapsed <= 600,
           f"in-domain acc two-stage {a.accuracy:.4f} vs stage2-first {b.accuracy:.4f} "
           f"(AUC {a.auc:.4f} vs {b.auc:.4f}), stage2-first took {elapsed:.0f}s")
