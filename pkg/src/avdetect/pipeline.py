"""Run orchestration shared by the command line and the acceptance tests.

Output layout under ``RunConfig.out``::

    corpus/                  manifest.jsonl, features.bin, corpus.hash, corpus_spec.json
    runs/<plan>-s<seed>/     config.json, manifest.lock, stage-<k>.ckpt, trace-<k>.csv
    runs/<plan>-s<seed>/eval report.json, scores.csv, roc.csv, confusion.txt
    ablation/                ablation.json, ablation.csv
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import CorpusSpec, Split, build_splits, corpus_hash, read_corpus, write_corpus
from .metrics import EvalReport, evaluate, render_report
from .model import ModelParams, PromptTemplate, init_params
from .training import FinetuneDataset, StagePlan, train_stage, write_trace

log = logging.getLogger(__name__)

ABLATION_ARMS = (("zero-shot", "none"), ("stage-1-only", "stage1-only"),
                 ("stage-2-only", "stage2-only"), ("two-stage", "two-stage"))
CHANCE_BAND = (0.35, 0.65)


class IntegrityError(RuntimeError):
    """On-disk data does not match what the run expects."""


# -- corpus -------------------------------------------------------------------

def corpus_dir(config: RunConfig) -> Path:
    return Path(config.out) / "corpus"


def generate_corpus(config: RunConfig) -> str:
    """Build and write the corpus; return its hash."""
    return write_corpus(build_splits(config.corpus), corpus_dir(config), config.corpus)


def verify_corpus(directory, spec: CorpusSpec | None = None) -> str:
    """Recompute the corpus hash and check it against ``corpus.hash``
    (and, when given, the stored generation spec)."""
    d = Path(directory)
    for name in ("manifest.jsonl", "features.bin", "corpus.hash"):
        if not (d / name).exists():
            raise IntegrityError(f"corpus at {d} is missing {name}")
    digest = corpus_hash(d)
    recorded = (d / "corpus.hash").read_text().strip()
    if digest != recorded:
        raise IntegrityError(f"corpus at {d} hashes to {digest[:12]}, corpus.hash says {recorded[:12]}")
    if spec is not None and (d / "corpus_spec.json").exists():
        stored = json.loads((d / "corpus_spec.json").read_text())
        if stored != json.loads(json.dumps(spec.to_dict())):
            raise IntegrityError(f"corpus at {d} was generated from a different corpus spec")
    return digest


def ensure_corpus(config: RunConfig) -> tuple[str, dict[str, Split]]:
    """Load the configured corpus, generating it first if absent."""
    d = corpus_dir(config)
    if not (d / "manifest.jsonl").exists():
        log.info("generating corpus in %s", d)
        generate_corpus(config)
    digest = verify_corpus(d, config.corpus)
    return digest, read_corpus(d)


# -- training -------------------------------------------------------------------

def run_dir(config: RunConfig, plan: str | None = None) -> Path:
    return Path(config.out) / "runs" / f"{plan or config.plan}-s{config.seed}"


def lock_corpus(directory: Path, digest: str):
    """Create ``manifest.lock`` or refuse if it names another corpus."""
    lock = directory / "manifest.lock"
    if lock.exists():
        locked = lock.read_text().strip()
        if locked != digest:
            raise IntegrityError(f"{directory} is locked to corpus {locked[:12]}, "
                                 f"current corpus is {digest[:12]}")
    else:
        lock.write_text(digest + "\n")


def train_plan(plan: StagePlan, train: Split, config: RunConfig, out=None,
               params: ModelParams | None = None, first_stage: int = 1):
    """Train ``plan`` from ``params`` (fresh init by default).

    Returns ``(params, traces, checkpoint_hashes)``; checkpoints are written
    only when ``out`` is given, ``stage-0.ckpt`` holding the starting point.
    """
    model_config = config.model_config()
    prompt = PromptTemplate()
    dataset = FinetuneDataset.from_split(train, prompt, model_config.vocab)
    params = init_params(model_config) if params is None else params.copy()
    hashes = {}
    if out is not None and first_stage == 1:
        hashes["stage-0.ckpt"] = checkpoint.save(params, Path(out) / "stage-0.ckpt")
    traces = []
    for k, stage in enumerate(plan.stages, start=first_stage):
        log.info("stage %d: %s, %d steps", k, stage.name or stage.mode, stage.steps)
        params, trace = train_stage(stage, dataset, params, seed=config.seed, tag=k,
                                    threads=config.threads)
        traces.append(trace)
        if out is not None:
            hashes[f"stage-{k}.ckpt"] = checkpoint.save(params, Path(out) / f"stage-{k}.ckpt")
            write_trace(trace, Path(out) / f"trace-{k}.csv")
    return params, traces, hashes


def train_run(config: RunConfig, plan: str | None = None) -> dict:
    """The ``train`` command: corpus check, lock, staged training, checkpoints."""
    digest, splits = ensure_corpus(config)
    out = run_dir(config, plan)
    out.mkdir(parents=True, exist_ok=True)
    lock_corpus(out, digest)
    (out / "config.json").write_text(config.to_json())
    stage_plan = config.stage_plan(plan)
    (out / "plan.json").write_text(json.dumps(stage_plan.to_dict(), sort_keys=True, indent=2) + "\n")
    _, traces, hashes = train_plan(stage_plan, splits["train"], config, out)
    return {"run_dir": str(out), "corpus_hash": digest, "checkpoints": hashes,
            "final_loss": [t[-1] if t else None for t in traces]}


def final_checkpoint(directory) -> Path:
    ckpts = sorted(Path(directory).glob("stage-*.ckpt"), key=lambda p: int(p.stem.split("-")[1]))
    if not ckpts:
        raise IntegrityError(f"no stage-<k>.ckpt in {directory}")
    return ckpts[-1]


# -- evaluation -----------------------------------------------------------------

def evaluate_params(params: ModelParams, splits: dict[str, Split], names, meta=None,
                    threads: int = 1) -> EvalReport:
    report = EvalReport(meta=dict(meta or {}))
    for name in names:
        report.splits[name] = evaluate(params, splits[name], threads=threads)
    return report


def eval_checkpoint(config: RunConfig, ckpt, names=None, out=None) -> tuple[EvalReport, list[str]]:
    """Score ``ckpt`` on the requested splits; returns the report and the
    names that were requested but are absent from the corpus."""
    digest, splits = ensure_corpus(config)
    names = list(names or config.eval_splits)
    missing = [n for n in names if n not in splits or len(splits[n]) == 0]
    present = [n for n in names if n not in missing]
    ckpt = Path(ckpt)
    params = checkpoint.load(ckpt)
    meta = {"checkpoint": ckpt.name, "checkpoint_sha256": checkpoint.file_hash(ckpt),
            "corpus_hash": digest, "missing_splits": missing}
    report = evaluate_params(params, splits, present, meta, config.threads)
    if out is not None:
        render_report(report, out)
    return report, missing


# -- ablation -------------------------------------------------------------------

@dataclass
class AblationResult:
    seeds: tuple
    accuracy: dict = field(default_factory=dict)   # arm -> list of per-seed accuracies
    reference: dict = field(default_factory=dict)  # same, on the in-domain split

    def seed_verdict(self, i: int) -> bool:
        z, s1, s2, two = (self.accuracy[arm][i] for arm, _ in ABLATION_ARMS)
        return two >= s2 >= s1 > z and CHANCE_BAND[0] <= z <= CHANCE_BAND[1]

    def verdicts(self) -> list[bool]:
        return [self.seed_verdict(i) for i in range(len(self.seeds))]

    def passed(self) -> bool:
        v = self.verdicts()
        return sum(v) * 2 > len(v)

    def gap_holds(self, i: int) -> bool:
        """Every trained arm scores strictly lower on the open set than in-domain."""
        return all(self.accuracy[arm][i] < self.reference[arm][i]
                   for arm, plan in ABLATION_ARMS if plan != "none")

    def rows(self) -> list[dict]:
        return [{"arm": arm, "mean_acc": float(np.mean(self.accuracy[arm])),
                 **{f"seed_{s}": a for s, a in zip(self.seeds, self.accuracy[arm])}}
                for arm, _ in ABLATION_ARMS]

    def to_dict(self) -> dict:
        d = {"split": "open_set_full", "seeds": list(self.seeds), "rows": self.rows(),
             "verdicts": self.verdicts(), "passed": self.passed()}
        if self.reference:
            d["in_domain"] = {arm: self.reference[arm] for arm, _ in ABLATION_ARMS}
            d["gap_holds"] = [self.gap_holds(i) for i in range(len(self.seeds))]
        return d


def ablation_plans(config: RunConfig) -> dict[str, dict]:
    return {arm: config.stage_plan(plan).to_dict() for arm, plan in ABLATION_ARMS}


def run_ablation(config: RunConfig, split: str = "open_set_full", seeds=None,
                 splits: dict[str, Split] | None = None) -> AblationResult:
    """Train the four arms for every seed and record accuracy on ``split``
    (and on ``in_domain`` when the corpus has it).

    The stage-1-only arm is the first stage of the two-stage arm, so it is
    trained once and continued.
    """
    if splits is None:
        _, splits = ensure_corpus(config)
    seeds = tuple(seeds or config.ablation_seeds)
    result = AblationResult(seeds, {arm: [] for arm, _ in ABLATION_ARMS})
    target = splits[split]
    reference = splits.get("in_domain")
    if reference is not None and len(reference):
        result.reference = {arm: [] for arm, _ in ABLATION_ARMS}
    for seed in seeds:
        cfg = _with_seed(config, seed)
        init = init_params(cfg.model_config())
        s1 = StagePlan([cfg.stage1], "stage1-only")
        s2 = StagePlan([cfg.stage2], "stage2-only")
        p1, _, _ = train_plan(s1, splits["train"], cfg, params=init)
        p12, _, _ = train_plan(s2, splits["train"], cfg, params=p1, first_stage=2)
        p2, _, _ = train_plan(s2, splits["train"], cfg, params=init)
        for (arm, _), params in zip(ABLATION_ARMS, (init, p1, p2, p12)):
            acc = evaluate(params, target, threads=cfg.threads).accuracy
            result.accuracy[arm].append(acc)
            if result.reference:
                result.reference[arm].append(evaluate(params, reference, threads=cfg.threads).accuracy)
            log.info("seed %d %s: acc %.4f", seed, arm, acc)
    return result


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    cfg = RunConfig.from_dict(config.to_dict())
    cfg.seed = seed
    return cfg
