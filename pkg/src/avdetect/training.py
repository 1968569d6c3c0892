"""Supervised fine-tuning: answer-token loss, Adam, and staged plans.

A plan is a list of stages.  A ``lora`` stage attaches adapters (if none are
attached) and keeps the decoder's base weights fixed, so the decoder adapts
only through the adapters; a ``full`` stage merges any adapters into the base
weights.  Either way every tensor outside the frozen groups trains.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, lora
from .autodiff import NumericError
from .data import FAKE, Split
from .model import GROUPS, ModelConfig, ModelParams, PromptTemplate, forward_batch, init_params
from .rng import stream

log = logging.getLogger(__name__)

ENCODERS = ("audio_encoder", "vision_encoder")


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Stage:
    mode: str
    frozen: tuple = ()
    steps: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    optimizer_state: str = "fresh"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple | None = None
    micro_batch: int | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if self.lora_targets is not None:
            object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.mode not in ("lora", "full"):
            raise ValueError(f"stage mode must be 'lora' or 'full', got {self.mode!r}")
        bad = set(self.frozen) - set(GROUPS)
        if bad:
            raise ValueError(f"stage freezes unknown groups {sorted(bad)}")
        if self.optimizer_state != "fresh":
            raise ValueError("only a fresh optimizer state per stage is supported")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("stage needs steps >= 0, batch_size >= 1, lr > 0")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ValueError("micro_batch must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        d["lora_targets"] = None if self.lora_targets is None else list(self.lora_targets)
        return d


def lora_stage(steps: int = 300, lr: float = 3e-3, batch_size: int = 32, **kw) -> Stage:
    """Stage 1: adapters on the decoder, both encoders frozen."""
    return Stage("lora", frozen=ENCODERS, steps=steps, lr=lr, batch_size=batch_size,
                 name="stage1-lora", **kw)


def full_stage(steps: int = 1200, lr: float = 1e-3, batch_size: int = 32,
               encoders_only: bool = False, **kw) -> Stage:
    """Stage 2: encoders unlocked; with ``encoders_only`` the rest stays frozen."""
    frozen = ("decoder", "embedding") if encoders_only else ()
    return Stage("full", frozen=frozen, steps=steps, lr=lr, batch_size=batch_size,
                 name="stage2-full", **kw)


@dataclass
class StagePlan:
    stages: list = field(default_factory=list)
    name: str = "custom"

    PRESETS = ("two-stage", "stage2-first", "stage1-only", "stage2-only", "none")

    @classmethod
    def preset(cls, name: str, stage1: Stage | None = None, stage2: Stage | None = None) -> "StagePlan":
        s1, s2 = stage1 or lora_stage(), stage2 or full_stage()
        table = {"two-stage": [s1, s2], "stage2-first": [s2, s1], "stage1-only": [s1],
                 "stage2-only": [s2], "none": []}
        if name not in table:
            raise ValueError(f"unknown plan {name!r}; choose from {cls.PRESETS}")
        return cls(table[name], name)

    def to_dict(self) -> dict:
        return {"name": self.name, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls([Stage(**s) for s in d.get("stages", [])], d.get("name", "custom"))


@dataclass
class FinetuneDataset:
    """Clips paired with the shared prompt and their answer-token ids."""

    split: Split
    prompt: PromptTemplate
    targets: np.ndarray

    @classmethod
    def from_split(cls, split: Split, prompt: PromptTemplate, vocab) -> "FinetuneDataset":
        targets = np.where(split.labels == FAKE, vocab.fake_id, vocab.real_id).astype(np.int64)
        return cls(split, prompt, targets)

    def __len__(self):
        return len(self.targets)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.split.audio, self.split.video, self.targets, self.split.sample_id):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def loss(dataset: FinetuneDataset, params: ModelParams, idx=None) -> ad.Tensor:
    """Mean answer-token cross-entropy over ``dataset`` (or rows ``idx``)."""
    if idx is None:
        idx = np.arange(len(dataset))
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("loss needs a nonempty batch")
    logits = forward_batch(dataset.split.audio[idx], dataset.split.video[idx], dataset.prompt, params)
    return ad.cross_entropy(logits, dataset.targets[idx])


class Adam:
    def __init__(self, tensors: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.tensors = tensors
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, t in self.tensors.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            t.data = t.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _set_requires_grad(params: ModelParams, trainable: dict):
    keep = {id(t) for t in trainable.values()}
    for t in params.tensors.values():
        t.requires_grad = id(t) in keep
    for a in params.adapters.values():
        a.A.requires_grad = id(a.A) in keep
        a.B.requires_grad = id(a.B) in keep


def _grad_chunk(dataset, params, trainable, idx):
    with ad.Tape() as tape:
        value = loss(dataset, params, idx)
    grads = ad.backward(tape, value)
    return value.item(), {k: grads.get(t) for k, t in trainable.items()}


def batches(n: int, batch_size: int, steps: int, seed: int, tag=0):
    """Yield ``steps`` index batches: a fresh seeded shuffle per epoch, drop-last."""
    if n < batch_size:
        raise ValueError(f"dataset of {n} samples is smaller than batch_size={batch_size}")
    per_epoch = n // batch_size
    epoch = 0
    done = 0
    while done < steps:
        order = stream(seed, "shuffle", tag, epoch).permutation(n)
        for b in range(per_epoch):
            if done == steps:
                return
            yield order[b * batch_size:(b + 1) * batch_size]
            done += 1
        epoch += 1


def prepare_stage(stage: Stage, params: ModelParams, seed: int = 0) -> ModelParams:
    """Freeze flags and adapter attach/merge for entering ``stage``."""
    if stage.mode == "lora":
        if not params.adapters:
            params = lora.attach(params, stage.lora_targets, stage.lora_rank, stage.lora_alpha, seed)
    elif params.adapters:
        params = lora.merge(params)
    params.unfreeze()
    params.freeze(*stage.frozen)
    if stage.mode == "lora":
        params.freeze("decoder")
    return params


def train_stage(stage: Stage, dataset: FinetuneDataset, params: ModelParams, seed: int = 0,
                tag=0, micro_batch: int | None = None, threads: int = 1):
    """Run one stage; return ``(params, loss_trace)``.

    The minibatch is cut into micro-batches of ``micro_batch`` rows (the
    stage's setting by default, else the whole batch) whose gradients are
    summed in index order; ``threads`` workers share the micro-batches, so
    results do not depend on the thread count.
    """
    params = prepare_stage(stage, params, seed)
    if stage.steps == 0:
        return params, []
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    trainable = params.trainable()
    _set_requires_grad(params, trainable)
    opt = Adam(trainable, stage.lr)
    mb = micro_batch or stage.micro_batch or stage.batch_size
    trace = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for step, idx in enumerate(batches(len(dataset), stage.batch_size, stage.steps, seed, tag)):
            chunks = [idx[i:i + mb] for i in range(0, len(idx), mb)]
            try:
                if pool is None:
                    results = [_grad_chunk(dataset, params, trainable, c) for c in chunks]
                else:
                    results = list(pool.map(lambda c: _grad_chunk(dataset, params, trainable, c), chunks))
            except NumericError as exc:
                raise DivergenceError(f"stage {stage.name or stage.mode}: step {step}: {exc}") from exc
            w = [len(c) / len(idx) for c in chunks]
            value = float(np.sum([wi * r[0] for wi, r in zip(w, results)]))
            if not np.isfinite(value):
                raise DivergenceError(f"stage {stage.name or stage.mode}: non-finite loss at step {step}")
            grads = {}
            for k in trainable:
                parts = [wi * r[1][k] for wi, r in zip(w, results) if r[1][k] is not None]
                if parts:
                    g = parts[0]
                    for p in parts[1:]:
                        g = g + p
                    grads[k] = g
            opt.step(grads)
            trace.append(value)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, trace


def write_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def run_plan(plan: StagePlan, dataset: FinetuneDataset, config: ModelConfig, seed: int = 0,
             out_dir=None, params: ModelParams | None = None, threads: int = 1):
    """Initialise (unless ``params`` is given) and run every stage in order.

    Returns ``(params, traces)``.  With ``out_dir`` each stage writes
    ``stage-<k>.ckpt`` and ``trace-<k>.csv`` (k counts from 1).
    """
    params = init_params(config) if params is None else params
    traces = []
    for k, stage in enumerate(plan.stages, start=1):
        log.info("stage %d/%d: %s, %d steps", k, len(plan.stages), stage.name or stage.mode, stage.steps)
        params, trace = train_stage(stage, dataset, params, seed=seed, tag=k, threads=threads)
        traces.append(trace)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            checkpoint.save(params, out / f"stage-{k}.ckpt")
            write_trace(trace, out / f"trace-{k}.csv")
    return params, traces
