"""Two-token scoring and detection metrics.

Fake is the positive class throughout.  A clip's score is ``p_fake``, the
softmax over just the ``Real`` and ``Fake`` logits; it is predicted fake when
``p_fake > 0.5`` (an exact tie predicts real).
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FAKE, REAL, Split
from .model import ModelParams, PromptTemplate, forward_batch

SCHEMA = "avdetect.report/1"
EXTERNAL_REAL_ID = 12768
EXTERNAL_FAKE_ID = 52317


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. only one class present)."""


def extract_two_token(logits, real_id: int, fake_id: int) -> tuple[float, float]:
    """Renormalise the two answer logits; every other vocabulary entry is ignored.

    The larger probability is computed first and the smaller as its exact
    complement, so the pair sums to 1 in floating point.
    """
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64).reshape(-1)
    n = logits.size
    if real_id == fake_id:
        raise ValueError("real_id and fake_id must differ")
    for name, i in (("real_id", real_id), ("fake_id", fake_id)):
        if not 0 <= i < n:
            raise IndexError(f"{name}={i} outside vocabulary of size {n}")
    margin = logits[fake_id] - logits[real_id]
    hi = 1.0 / (1.0 + math.exp(-abs(margin)))
    lo = 1.0 - hi
    return (lo, hi) if margin > 0 else (hi, lo)


def two_token_batch(logits: np.ndarray, real_id: int, fake_id: int) -> np.ndarray:
    """Vectorised ``p_fake`` for a ``[n, n_vocab]`` logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    margin = logits[:, fake_id] - logits[:, real_id]
    hi = 1.0 / (1.0 + np.exp(-np.abs(margin)))
    return np.where(margin > 0, hi, 1.0 - hi)


@dataclass(frozen=True)
class ScoredSample:
    sample_id: int
    label: int
    p_fake: float

    @property
    def p_real(self) -> float:
        return 1.0 - self.p_fake

    @property
    def predicted(self) -> int:
        return FAKE if self.p_fake > 0.5 else REAL


def _arrays(scored):
    ids = np.array([s.sample_id for s in scored], dtype=np.int64)
    labels = np.array([s.label for s in scored], dtype=np.int64)
    scores = np.array([s.p_fake for s in scored], dtype=np.float64)
    return ids, labels, scores


def _check_two_classes(labels: np.ndarray, metric: str):
    if not ((labels == FAKE).any() and (labels == REAL).any()):
        raise UndefinedMetricError(f"{metric} is undefined without both real and fake samples")


def auc(scored) -> float:
    """ROC-AUC by the Mann-Whitney statistic, ties counted one half."""
    _, labels, scores = _arrays(scored)
    _check_two_classes(labels, "AUC")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2.0 + 1.0
        i = j + 1
    pos = labels[order] == FAKE
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels, ids, positive: int) -> float:
    """Mean precision at each positive's rank; ties ordered by sample id."""
    order = np.lexsort((ids, -np.asarray(scores)))
    hits = np.asarray(labels)[order] == positive
    if not hits.any():
        raise UndefinedMetricError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks)


def mean_average_precision(scored, classes=("fake", "real")) -> float:
    """Mean of one-vs-rest AP: fakes ranked by ``p_fake``, reals by ``p_real``.

    ``classes=("fake",)`` gives fake-only AP.
    """
    ids, labels, scores = _arrays(scored)
    _check_two_classes(labels, "mAP")
    aps = []
    if "fake" in classes:
        aps.append(average_precision(scores, labels, ids, FAKE))
    if "real" in classes:
        aps.append(average_precision(1.0 - scores, labels, ids, REAL))
    return math.fsum(aps) / len(aps)


def confusion(scored) -> dict[str, int]:
    tp = fp = tn = fn = 0
    for s in scored:
        if s.predicted == FAKE:
            tp, fp = (tp + 1, fp) if s.label == FAKE else (tp, fp + 1)
        else:
            tn, fn = (tn + 1, fn) if s.label == REAL else (tn, fn + 1)
    return {"TP": tp, "FP": fp, "TN": tn, "FN": fn}


def roc_points(scored) -> list[tuple[float, float]]:
    """(FPR, TPR) after each distinct threshold, from (0, 0) to (1, 1)."""
    _, labels, scores = _arrays(scored)
    _check_two_classes(labels, "ROC")
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], labels[order] == FAKE
    n_pos, n_neg = pos.sum(), (~pos).sum()
    pts = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(s)):
        tp += int(pos[i])
        fp += int(not pos[i])
        if i + 1 == len(s) or s[i + 1] != s[i]:
            pts.append((fp / n_neg, tp / n_pos))
    return pts


@dataclass
class SplitReport:
    split: str
    n: int
    accuracy: float
    auc: float | None
    map: float | None
    ap_fake: float | None
    confusion: dict
    undefined: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def confusion_percent(self) -> dict[str, list[float] | None]:
        """Rows are true Real / true Fake, columns predicted Real / Fake."""
        c = self.confusion
        rows = {"real": (c["TN"], c["FP"]), "fake": (c["FN"], c["TP"])}
        return {k: ([100.0 * a / (a + b), 100.0 * b / (a + b)] if a + b else None)
                for k, (a, b) in rows.items()}


def split_report(name: str, scored: list[ScoredSample]) -> SplitReport:
    """Aggregate per-sample scores; undefined metrics are recorded, not raised."""
    if not scored:
        raise ValueError(f"split {name!r} is empty")
    scored = sorted(scored, key=lambda s: s.sample_id)
    cm = confusion(scored)
    undefined = []
    metrics = {}
    for key, fn in (("auc", auc), ("map", mean_average_precision),
                    ("ap_fake", lambda s: mean_average_precision(s, ("fake",)))):
        try:
            metrics[key] = fn(scored)
        except UndefinedMetricError:
            metrics[key] = None
            undefined.append(key)
    return SplitReport(name, len(scored), (cm["TP"] + cm["TN"]) / len(scored), metrics["auc"],
                       metrics["map"], metrics["ap_fake"], cm, undefined, scored)


@dataclass
class EvalReport:
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA, "meta": self.meta, "splits": {}}
        for name, r in self.splits.items():
            d = asdict(r)
            d.pop("scores")
            d["confusion_percent"] = r.confusion_percent()
            out["splits"][name] = d
        return out

    def summary_rows(self) -> list[dict]:
        return [{"split": n, "mAP": r.map, "AUC": r.auc, "acc": 100.0 * r.accuracy}
                for n, r in self.splits.items()]


def score_split(params: ModelParams, split: Split, prompt: PromptTemplate,
                chunk: int = 250, threads: int = 1) -> np.ndarray:
    """``p_fake`` for every clip of ``split``, in row order."""
    vocab = params.config.vocab
    starts = list(range(0, len(split), chunk))

    def run(i):
        logits = forward_batch(split.audio[i:i + chunk], split.video[i:i + chunk], prompt, params).data
        return two_token_batch(logits, vocab.real_id, vocab.fake_id)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(i) for i in starts]
    return np.concatenate(parts) if parts else np.zeros(0)


def evaluate(params: ModelParams, split: Split, prompt: PromptTemplate | None = None,
             threads: int = 1) -> SplitReport:
    if len(split) == 0:
        raise ValueError(f"split {split.name!r} is empty")
    p = score_split(params, split, prompt or PromptTemplate(), threads=threads)
    scored = [ScoredSample(int(i), int(y), float(s))
              for i, y, s in zip(split.sample_id, split.labels, p)]
    return split_report(split.name, scored)


# -- files -------------------------------------------------------------------

def render_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.json``, ``scores.csv``, ``roc.csv`` and ``confusion.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in ("report.json", "scores.csv", "roc.csv", "confusion.txt")]
    paths[0].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    with open(paths[1], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "sample_id", "label", "p_fake"])
        for name, r in report.splits.items():
            for s in r.scores:
                w.writerow([name, s.sample_id, "fake" if s.label == FAKE else "real", repr(s.p_fake)])
    with open(paths[2], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "fpr", "tpr"])
        for name, r in report.splits.items():
            if "auc" in r.undefined:
                continue
            for fpr, tpr in roc_points(r.scores):
                w.writerow([name, repr(fpr), repr(tpr)])
    lines = []
    for name, r in report.splits.items():
        pct = r.confusion_percent()
        lines += [f"[{name}] rows: true class, columns: predicted (%)",
                  f"{'':>6} {'Real':>8} {'Fake':>8}"]
        for row in ("real", "fake"):
            vals = pct[row]
            cells = "     n/a      n/a" if vals is None else f"{vals[0]:8.2f} {vals[1]:8.2f}"
            lines.append(f"{row.capitalize():>6} {cells}")
        lines.append("")
    paths[3].write_text("\n".join(lines))
    return paths


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def read_external_logits(manifest_path, logits_path, real_id: int = EXTERNAL_REAL_ID,
                         fake_id: int = EXTERNAL_FAKE_ID) -> dict[str, list[ScoredSample]]:
    """Score full-vocabulary logit dumps from another model.

    ``ext_manifest.jsonl`` holds one record per clip: ``sample_id``, ``label``
    (``real``/``fake``), optional ``split`` (default ``external``), ``offset``
    (bytes into the logits file), ``n_vocab`` and optional ``dtype``
    (``float32`` default, or ``float64``).  Values are little-endian and are
    widened to float64 before renormalisation.
    """
    raw = Path(logits_path).read_bytes()
    out: dict[str, list[ScoredSample]] = {}
    with open(manifest_path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            dtype = {"float32": "<f4", "float64": "<f8"}[rec.get("dtype", "float32")]
            row = np.frombuffer(raw, dtype=dtype, count=int(rec["n_vocab"]),
                                offset=int(rec["offset"])).astype(np.float64)
            _, p_fake = extract_two_token(row, real_id, fake_id)
            label = FAKE if rec["label"] == "fake" else REAL
            out.setdefault(rec.get("split", "external"), []).append(
                ScoredSample(int(rec["sample_id"]), label, p_fake))
    return out
