"""Deterministic synthetic audio-visual corpus.

A real clip is driven by one latent trajectory ``z_t`` (a sum of three
sinusoids per latent dimension, frequencies drawn from the clip's style band).
Audio and video are fixed linear images of ``z_t`` plus Gaussian noise, so the
two streams agree frame by frame.  Fakes break this in two ways:

* ``audio_swap``: the audio is rendered from an independent trajectory;
* ``visual_fingerprint``: the video is re-rendered from a trajectory that
  only partly follows the original (``visual_resynth`` sets the share of an
  independent one), then a generator-specific fixed pattern is added;
* ``both``: swapped audio, and the pattern added to the original video.

Generators and styles are split into held-in and held-out sets, which yields
the four evaluation splits (in-domain, open-set generator, open-set style,
open-set full).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

FAKE_KINDS = ("audio_swap", "visual_fingerprint", "both")
SPLITS = ("train", "in_domain", "open_set_generator", "open_set_style", "open_set_full")

REAL, FAKE = 0, 1


class CorpusConfigError(ValueError):
    """The corpus specification is inconsistent."""


@dataclass(frozen=True)
class CorpusSpec:
    counts: dict = field(default_factory=lambda: {
        "train": 32000, "in_domain": 1000, "open_set_generator": 1000,
        "open_set_style": 1000, "open_set_full": 1000})
    n_generators: int = 6
    held_out_generators: tuple = (5, 6)
    n_styles: int = 8
    held_out_styles: tuple = (6, 7)
    sigma: float = 0.1
    fingerprint_scale: float = 1.0
    visual_resynth: float = 0.5
    real_fraction: float = 0.5
    fake_kind_weights: tuple = (0.4, 0.2, 0.4)
    d_latent: int = 8
    energy_spread: float = 1.5
    seq_len: int = 32
    d_audio: int = 16
    d_vision: int = 24
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "held_out_generators", tuple(self.held_out_generators))
        object.__setattr__(self, "held_out_styles", tuple(self.held_out_styles))
        object.__setattr__(self, "fake_kind_weights", tuple(float(w) for w in self.fake_kind_weights))
        w = self.fake_kind_weights
        if len(w) != len(FAKE_KINDS) or min(w) < 0 or sum(w) <= 0:
            raise CorpusConfigError(f"fake_kind_weights: need {len(FAKE_KINDS)} non-negative weights")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise CorpusConfigError(f"counts: unknown splits {sorted(unknown)}")
        for name, n in self.counts.items():
            if int(n) != n or n < 0:
                raise CorpusConfigError(f"counts.{name}: must be a non-negative integer")
        if sum(self.counts.values()) >= 2 ** 32:
            raise CorpusConfigError("counts: total exceeds the 2**32 sample-id space")
        gens = set(range(1, self.n_generators + 1))
        if not set(self.held_out_generators) < gens:
            raise CorpusConfigError("held_out_generators: must be a proper subset of 1..n_generators")
        if not set(self.held_out_styles) < set(range(self.n_styles)):
            raise CorpusConfigError("held_out_styles: must be a proper subset of 0..n_styles-1")
        if not 0.0 < self.real_fraction < 1.0:
            raise CorpusConfigError("real_fraction: must lie strictly between 0 and 1")
        if self.sigma < 0:
            raise CorpusConfigError("sigma: must be non-negative")
        if not 0.0 <= self.visual_resynth <= 1.0:
            raise CorpusConfigError("visual_resynth: must lie in [0, 1]")
        if self.d_vision < self.n_generators:
            raise CorpusConfigError("d_vision: need at least one channel per generator")
        for name in ("d_latent", "seq_len", "d_audio", "d_vision"):
            if getattr(self, name) < 1:
                raise CorpusConfigError(f"{name}: must be positive")

    @property
    def held_in_generators(self) -> tuple:
        return tuple(g for g in range(1, self.n_generators + 1) if g not in self.held_out_generators)

    @property
    def held_in_styles(self) -> tuple:
        return tuple(s for s in range(self.n_styles) if s not in self.held_out_styles)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["held_out_generators"] = list(self.held_out_generators)
        d["held_out_styles"] = list(self.held_out_styles)
        d["fake_kind_weights"] = list(self.fake_kind_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise CorpusConfigError(f"unknown corpus fields: {sorted(unknown)}")
        counts = dict(cls().counts) | dict(d.get("counts", {}))
        return cls(**(dict(d) | {"counts": counts}))


@dataclass
class AvSample:
    audio: np.ndarray
    video: np.ndarray
    label: int
    fake_kind: str
    generator_id: int
    style_id: int
    sample_id: int

    def __post_init__(self):
        if (self.label == REAL) != (self.fake_kind == "none"):
            raise ValueError("label must be real exactly when fake_kind is 'none'")
        if self.label == REAL and self.generator_id != 0:
            raise ValueError("real samples carry generator_id 0")


# -- fixed corpus-wide structure ---------------------------------------------

def projections(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Style-independent latent-to-feature maps ``P_a`` and ``P_v``."""
    rng = stream(spec.seed, "projections")
    P_a = rng.standard_normal((spec.d_audio, spec.d_latent)) / np.sqrt(spec.d_latent)
    P_v = rng.standard_normal((spec.d_vision, spec.d_latent)) / np.sqrt(spec.d_latent)
    return P_a, P_v


def fingerprint_channels(generator_id: int, spec: CorpusSpec) -> np.ndarray:
    """Boolean mask of the vision channels a generator disturbs.

    The channels are cut into ``n_generators`` disjoint blocks (in a seeded
    order) and each generator owns one block, so held-out generators leave
    their marks where no training fake ever did.
    """
    if not 1 <= generator_id <= spec.n_generators:
        raise ValueError(f"generator_id {generator_id} outside 1..{spec.n_generators}")
    order = stream(spec.seed, "fingerprint_channels").permutation(spec.d_vision)
    blocks = np.array_split(order, spec.n_generators)
    mask = np.zeros(spec.d_vision, dtype=bool)
    mask[blocks[generator_id - 1]] = True
    return mask


def fingerprint(generator_id: int, spec: CorpusSpec) -> np.ndarray:
    """Additive ``[seq_len, d_vision]`` video pattern of one generator:
    ``±fingerprint_scale`` on the generator's own channels, constant over frames."""
    mask = fingerprint_channels(generator_id, spec)
    signs = stream(spec.seed, "fingerprint", generator_id).integers(0, 2, size=spec.d_vision) * 2.0 - 1.0
    return np.tile(spec.fingerprint_scale * signs * mask, (spec.seq_len, 1))


def style_band(style_id: int) -> tuple[float, float]:
    """Frequency band, in cycles per clip, of a style family."""
    lo = 1.0 + 0.5 * style_id
    return lo, lo + 1.0


def style_profile(spec: CorpusSpec, style_id: int) -> np.ndarray:
    """Mean log-energy of each latent dimension for a style family."""
    return 0.5 * stream(spec.seed, "style_profile", style_id).standard_normal(spec.d_latent)


def latent(spec: CorpusSpec, style_id: int, sample_id: int, tag: str = "latent") -> np.ndarray:
    """``[seq_len, d_latent]`` trajectory: unit-power sinusoid mixtures in the
    style's band, each dimension scaled by a per-clip random energy."""
    rng = stream(spec.seed, tag, style_id, sample_id)
    lo, hi = style_band(style_id)
    freqs = rng.uniform(lo, hi, size=(3, spec.d_latent))
    phases = rng.uniform(0.0, 2 * np.pi, size=(3, spec.d_latent))
    amps = rng.uniform(0.5, 1.0, size=(3, spec.d_latent))
    scales = np.exp(style_profile(spec, style_id) + spec.energy_spread * rng.standard_normal(spec.d_latent))
    t = np.arange(spec.seq_len)[:, None, None] / spec.seq_len
    z = (amps * np.sin(2 * np.pi * freqs * t + phases)).sum(axis=1)
    return scales * z / np.sqrt((amps ** 2).sum(axis=0) / 2)


def _render(z: np.ndarray, P: np.ndarray, spec: CorpusSpec, style_id: int, sample_id: int,
            tag: str) -> np.ndarray:
    noise = stream(spec.seed, tag, style_id, sample_id).standard_normal((spec.seq_len, P.shape[0]))
    return z @ P.T + spec.sigma * noise


# -- generators --------------------------------------------------------------

def gen_real(style_id: int, sample_id: int, spec: CorpusSpec) -> AvSample:
    if not 0 <= style_id < spec.n_styles:
        raise ValueError(f"style_id {style_id} outside 0..{spec.n_styles - 1}")
    P_a, P_v = projections(spec)
    z = latent(spec, style_id, sample_id)
    return AvSample(audio=_render(z, P_a, spec, style_id, sample_id, "audio_noise"),
                    video=_render(z, P_v, spec, style_id, sample_id, "video_noise"),
                    label=REAL, fake_kind="none", generator_id=0, style_id=style_id,
                    sample_id=sample_id)


def gen_fake(kind: str, generator_id: int, style_id: int, sample_id: int,
             spec: CorpusSpec) -> AvSample:
    if kind not in FAKE_KINDS:
        raise ValueError(f"fake kind must be one of {FAKE_KINDS}, got {kind!r}")
    base = gen_real(style_id, sample_id, spec)
    audio, video = base.audio, base.video
    if kind in ("audio_swap", "both"):
        P_a, _ = projections(spec)
        z_other = latent(spec, style_id, sample_id, tag="swap_latent")
        audio = _render(z_other, P_a, spec, style_id, sample_id, "audio_noise")
    if kind == "visual_fingerprint" and spec.visual_resynth > 0:
        # the generator re-renders the video from a trajectory that only
        # partly follows the original, loosening its tie to the audio
        _, P_v = projections(spec)
        m = spec.visual_resynth
        z = (np.sqrt(1.0 - m) * latent(spec, style_id, sample_id)
             + np.sqrt(m) * latent(spec, style_id, sample_id, tag="resynth_latent"))
        video = _render(z, P_v, spec, style_id, sample_id, "video_noise")
    if kind in ("visual_fingerprint", "both"):
        video = video + fingerprint(generator_id, spec)
    return AvSample(audio=audio, video=video, label=FAKE, fake_kind=kind,
                    generator_id=generator_id, style_id=style_id, sample_id=sample_id)


@dataclass
class Split:
    """A split held as stacked arrays, in sample_id order."""

    name: str
    audio: np.ndarray
    video: np.ndarray
    labels: np.ndarray
    fake_kind: list
    generator_id: np.ndarray
    style_id: np.ndarray
    sample_id: np.ndarray

    def __len__(self):
        return len(self.labels)

    def sample(self, i: int) -> AvSample:
        return AvSample(self.audio[i], self.video[i], int(self.labels[i]), self.fake_kind[i],
                        int(self.generator_id[i]), int(self.style_id[i]), int(self.sample_id[i]))

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.name, self.audio[idx], self.video[idx], self.labels[idx],
                     [self.fake_kind[i] for i in idx], self.generator_id[idx],
                     self.style_id[idx], self.sample_id[idx])

    @classmethod
    def from_samples(cls, name: str, samples: list[AvSample]) -> "Split":
        return cls(name, np.stack([s.audio for s in samples]), np.stack([s.video for s in samples]),
                   np.array([s.label for s in samples], dtype=np.int64),
                   [s.fake_kind for s in samples],
                   np.array([s.generator_id for s in samples], dtype=np.int64),
                   np.array([s.style_id for s in samples], dtype=np.int64),
                   np.array([s.sample_id for s in samples], dtype=np.int64))


def _split_pools(spec: CorpusSpec, split: str) -> tuple[tuple, tuple]:
    gi, go = spec.held_in_generators, spec.held_out_generators
    si, so = spec.held_in_styles, spec.held_out_styles
    return {"train": (gi, si), "in_domain": (gi, si), "open_set_generator": (go, si),
            "open_set_style": (gi, so), "open_set_full": (go, so)}[split]


def build_split(spec: CorpusSpec, split: str, first_id: int) -> Split:
    n = int(spec.counts.get(split, 0))
    gens, styles = _split_pools(spec, split)
    n_real = int(round(n * spec.real_fraction))
    rng = stream(spec.seed, "assign", split)
    labels = np.array([REAL] * n_real + [FAKE] * (n - n_real))
    rng.shuffle(labels)
    samples = []
    for i, label in enumerate(labels):
        sid = first_id + i
        pick = stream(spec.seed, "pick", sid)
        style = int(pick.choice(styles))
        if label == REAL:
            samples.append(gen_real(style, sid, spec))
        else:
            w = np.array(spec.fake_kind_weights)
            kind = FAKE_KINDS[int(np.searchsorted(np.cumsum(w / w.sum()), pick.random(), side="right"))]
            samples.append(gen_fake(kind, int(pick.choice(gens)), style, sid, spec))
    if not samples:
        empty = np.zeros((0, spec.seq_len, spec.d_audio)), np.zeros((0, spec.seq_len, spec.d_vision))
        z = np.zeros(0, dtype=np.int64)
        return Split(split, empty[0], empty[1], z, [], z, z, z)
    return Split.from_samples(split, samples)


def build_splits(spec: CorpusSpec) -> dict[str, Split]:
    """All five splits; sample ids are assigned contiguously in split order."""
    out, first = {}, 0
    for name in SPLITS:
        out[name] = build_split(spec, name, first)
        first += int(spec.counts.get(name, 0))
    return out


# -- on-disk format ----------------------------------------------------------

def _file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_corpus(splits: dict[str, Split], out_dir, spec: CorpusSpec | None = None) -> str:
    """Write ``manifest.jsonl``, ``features.bin`` and ``corpus.hash``; return the hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(out / "features.bin.tmp", "wb") as fb, open(out / "manifest.jsonl.tmp", "w") as fm:
        for name in SPLITS:
            sp = splits.get(name)
            if sp is None:
                continue
            for i in range(len(sp)):
                a = np.ascontiguousarray(sp.audio[i], dtype="<f8").tobytes()
                v = np.ascontiguousarray(sp.video[i], dtype="<f8").tobytes()
                fb.write(a)
                fb.write(v)
                rec = {"sample_id": int(sp.sample_id[i]), "split": name,
                       "label": "real" if sp.labels[i] == REAL else "fake",
                       "fake_kind": sp.fake_kind[i], "generator_id": int(sp.generator_id[i]),
                       "style_id": int(sp.style_id[i]), "offset": offset,
                       "audio_shape": list(sp.audio.shape[1:]), "video_shape": list(sp.video.shape[1:])}
                fm.write(json.dumps(rec, sort_keys=True) + "\n")
                offset += len(a) + len(v)
    os.replace(out / "features.bin.tmp", out / "features.bin")
    os.replace(out / "manifest.jsonl.tmp", out / "manifest.jsonl")
    if spec is not None:
        (out / "corpus_spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    digest = corpus_hash(out)
    (out / "corpus.hash").write_text(digest + "\n")
    return digest


def corpus_hash(corpus_dir) -> str:
    d = Path(corpus_dir)
    return _file_digest([d / "manifest.jsonl", d / "features.bin"])


def read_corpus(corpus_dir, splits=None) -> dict[str, Split]:
    """Load splits from disk; also accepts externally produced features."""
    d = Path(corpus_dir)
    feats = np.memmap(d / "features.bin", dtype="<f8", mode="r")
    grouped: dict[str, list[AvSample]] = {}
    with open(d / "manifest.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            if splits is not None and rec["split"] not in splits:
                continue
            start = rec["offset"] // 8
            na = int(np.prod(rec["audio_shape"]))
            nv = int(np.prod(rec["video_shape"]))
            audio = np.array(feats[start:start + na]).reshape(rec["audio_shape"])
            video = np.array(feats[start + na:start + na + nv]).reshape(rec["video_shape"])
            grouped.setdefault(rec["split"], []).append(AvSample(
                audio, video, REAL if rec["label"] == "real" else FAKE, rec["fake_kind"],
                rec["generator_id"], rec["style_id"], rec["sample_id"]))
    return {name: Split.from_samples(name, sorted(s, key=lambda x: x.sample_id))
            for name, s in grouped.items()}
