"""Miniature audio-visual language model.

Two transformer encoders (audio, vision) produce one token per frame.  Their
outputs are concatenated with the embedded prompt and read by a prefix-LM
decoder: frame tokens attend bidirectionally among themselves, prompt tokens
attend to every frame token and causally within the prompt.  The logits at
the prompt's answer position score the next token, which is supervised to be
``Real`` or ``Fake``.
"""
from __future__ import annotations

import copy
import dataclasses
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .rng import stream

GROUPS = ("audio_encoder", "vision_encoder", "decoder", "embedding")

SYSTEM_INSTRUCTION = "Only answer 'Real' or 'Fake'"
QUESTION = "Given the video, please assess if it's Real or Fake?"

_SPECIALS = ["<pad>", "Real", "Fake", "<bos>", "<sys>", "<user>", "<assistant>", "<unk>"]
_PIECES = ["Only", " answer", " ", "'", " or", "Given", " the", " video", ",",
           " please", " assess", " if", " it", "s", " Real", " Fake", "?",
           "\n", ".", " is", " real", " fake", " Is", " this"]
_PIECE_RE = re.compile(r" ?[A-Za-z]+|\s|[^A-Za-z\s]")


class VocabularyError(ValueError):
    """Text contains a piece the vocabulary cannot represent."""


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...] = tuple(_SPECIALS + _PIECES)
    pad_id: int = 0
    real_id: int = 1
    fake_id: int = 2
    bos_id: int = 3
    sys_id: int = 4
    user_id: int = 5
    assistant_id: int = 6

    def __post_init__(self):
        n = len(self.tokens)
        if len(set(self.tokens)) != n:
            raise ValueError("vocabulary tokens must be distinct")
        if self.real_id == self.fake_id:
            raise ValueError("real_id and fake_id must differ")
        for name in ("pad_id", "real_id", "fake_id", "bos_id", "sys_id", "user_id", "assistant_id"):
            if not 0 <= getattr(self, name) < n:
                raise ValueError(f"{name} outside vocabulary of size {n}")

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        lookup = {t: i for i, t in enumerate(self.tokens)}
        pieces = _PIECE_RE.findall(text)
        if "".join(pieces) != text:
            raise VocabularyError(f"cannot segment {text!r}")
        ids = []
        for p in pieces:
            if p not in lookup:
                raise VocabularyError(f"piece {p!r} is not in the vocabulary")
            ids.append(lookup[p])
        return ids

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tokens"] = list(self.tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        d = dict(d)
        d["tokens"] = tuple(d["tokens"])
        return cls(**d)


@dataclass(frozen=True)
class PromptTemplate:
    """The fixed instruction/question pair shared by every sample.

    ``pad_after`` appends padding after the answer position; causal masking
    keeps it from influencing the answer logits.
    """

    system_instruction: str = SYSTEM_INSTRUCTION
    question: str = QUESTION
    pad_after: int = 0

    def token_ids(self, vocab: Vocab) -> np.ndarray:
        ids = ([vocab.bos_id, vocab.sys_id] + vocab.encode(self.system_instruction)
               + [vocab.user_id] + vocab.encode(self.question) + [vocab.assistant_id]
               + [vocab.pad_id] * self.pad_after)
        return np.array(ids, dtype=np.int64)

    def answer_position(self, vocab: Vocab) -> int:
        """Index (within the prompt) whose logits predict the answer token."""
        return len(self.token_ids(vocab)) - 1 - self.pad_after


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers_audio: int = 2
    n_enc_layers_vision: int = 2
    n_dec_layers: int = 2
    d_audio_in: int = 16
    d_vision_in: int = 24
    seq_len: int = 32
    d_ff: int = 128
    max_prompt_len: int = 48
    vocab: Vocab = field(default_factory=Vocab)
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("d_model", "n_heads", "d_audio_in", "d_vision_in", "seq_len", "d_ff",
                     "max_prompt_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["vocab"] = self.vocab.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "vocab" in d:
            d["vocab"] = Vocab.from_dict(d["vocab"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Named parameter tensors split into freezable groups, plus LoRA adapters."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor],
                 frozen: dict[str, bool] | None = None, adapters: dict | None = None):
        self.config = config
        self.tensors = tensors
        self.frozen = {g: False for g in GROUPS} | (frozen or {})
        self.adapters = adapters or {}
        for name in tensors:
            group_of(name)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, group: str) -> dict[str, Tensor]:
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        return {k: v for k, v in self.tensors.items() if group_of(k) == group}

    def freeze(self, *groups: str) -> "ModelParams":
        for g in groups:
            if g not in GROUPS:
                raise KeyError(f"unknown parameter group {g!r}")
            self.frozen[g] = True
        return self

    def unfreeze(self, *groups: str) -> "ModelParams":
        for g in groups or GROUPS:
            if g not in GROUPS:
                raise KeyError(f"unknown parameter group {g!r}")
            self.frozen[g] = False
        return self

    def trainable(self) -> dict[str, Tensor]:
        """Tensors an optimizer step may update.

        Every tensor in an unfrozen group trains, except a base weight that
        carries an adapter; the adapter's ``A`` and ``B`` train in its place.
        """
        out = {k: v for k, v in self.tensors.items()
               if not self.frozen[group_of(k)] and k not in self.adapters}
        for target, a in self.adapters.items():
            out[f"lora.{target}.A"] = a.A
            out[f"lora.{target}.B"] = a.B
        return out

    def n_params(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def digest(self, groups=GROUPS) -> str:
        """SHA-256 over the raw bytes of every tensor in ``groups``."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.tensors):
            if group_of(name) in groups:
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()


def group_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no group")
    return group


# -- initialisation ----------------------------------------------------------

def _block_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    shapes = {f"{prefix}.ln1.gain": (d,), f"{prefix}.ln1.bias": (d,)}
    for p in "qkvo":
        shapes[f"{prefix}.attn.{p}.weight"] = (d, d)
        shapes[f"{prefix}.attn.{p}.bias"] = (d,)
    shapes |= {f"{prefix}.ln2.gain": (d,), f"{prefix}.ln2.bias": (d,),
               f"{prefix}.mlp.fc1.weight": (d_ff, d), f"{prefix}.mlp.fc1.bias": (d_ff,),
               f"{prefix}.mlp.fc2.weight": (d, d_ff), f"{prefix}.mlp.fc2.bias": (d,)}
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, T = config.d_model, config.seq_len
    shapes: dict[str, tuple[int, ...]] = {}
    for enc, d_in, n in (("audio_encoder", config.d_audio_in, config.n_enc_layers_audio),
                         ("vision_encoder", config.d_vision_in, config.n_enc_layers_vision)):
        shapes[f"{enc}.in_proj.weight"] = (d, d_in)
        shapes[f"{enc}.in_proj.bias"] = (d,)
        shapes[f"{enc}.pos"] = (T, d)
        for i in range(n):
            shapes |= _block_shapes(f"{enc}.layers.{i}", d, config.d_ff)
        shapes[f"{enc}.ln_f.gain"] = (d,)
        shapes[f"{enc}.ln_f.bias"] = (d,)
    for i in range(config.n_dec_layers):
        shapes |= _block_shapes(f"decoder.layers.{i}", d, config.d_ff)
    shapes["decoder.ln_f.gain"] = (d,)
    shapes["decoder.ln_f.bias"] = (d,)
    V = len(config.vocab)
    shapes |= {"embedding.tokens": (V, d), "embedding.types": (3, d),
               "embedding.frame_pos": (T, d), "embedding.prompt_pos": (config.max_prompt_len, d),
               "embedding.head.weight": (V, d), "embedding.head.bias": (V,)}
    return shapes


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded initialisation: scaled-normal weights, zero biases, unit norm gains.

    Projections feeding the residual stream are scaled down by the depth of
    their stack; embeddings and the output head start small so the untrained
    model has no preference between the answer tokens.
    """
    rng = stream(config.seed, "init")
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf == "bias":
            data = np.zeros(shape)
        elif name.startswith("embedding.head"):
            data = rng.standard_normal(shape) * 0.02
        elif name.startswith("embedding.") or leaf == "pos":
            data = rng.standard_normal(shape) * 0.1
        else:
            std = 1.0 / math.sqrt(shape[1])
            if ".attn.o." in name or ".fc2." in name:
                n_layers = 2 * max(config.n_dec_layers, config.n_enc_layers_audio,
                                   config.n_enc_layers_vision)
                std /= math.sqrt(n_layers)
            data = rng.standard_normal(shape) * std
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


# -- forward -----------------------------------------------------------------

def linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    """``x @ W.T + b`` for the layer ``name``, plus its LoRA delta if attached."""
    W = params[f"{name}.weight"]
    out = ad.add(ad.matmul(x, ad.transpose(W)), params[f"{name}.bias"])
    adapter = params.adapters.get(f"{name}.weight")
    if adapter is not None:
        low = ad.matmul(ad.matmul(x, ad.transpose(adapter.A)), ad.transpose(adapter.B))
        out = ad.add(out, ad.mul(low, adapter.scale))
    return out


def _attention(h: Tensor, hq: Tensor, params: ModelParams, prefix: str, mask) -> Tensor:
    cfg = params.config
    B, L, d = h.shape
    Lq = hq.shape[1]
    H, dh = cfg.n_heads, d // cfg.n_heads

    def heads(t, n):
        return ad.transpose(ad.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

    q = heads(linear(hq, params, f"{prefix}.attn.q"), Lq)
    k = heads(linear(h, params, f"{prefix}.attn.k"), L)
    v = heads(linear(h, params, f"{prefix}.attn.v"), L)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask)
    att = ad.softmax(scores, axis=-1)
    o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, Lq, d))
    return linear(o, params, f"{prefix}.attn.o")


def block(x: Tensor, params: ModelParams, prefix: str, mask=None, rows=None) -> Tensor:
    """Pre-norm transformer block.

    ``rows`` (a slice) restricts the output to those query positions; keys and
    values still span the whole sequence.
    """
    p = params
    h = ad.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    if rows is None:
        xq, hq = x, h
    else:
        xq, hq = ad.take(x, (slice(None), rows)), ad.take(h, (slice(None), rows))
        if mask is not None:
            mask = mask[rows]
    x = ad.add(xq, _attention(h, hq, p, prefix, mask))
    h = ad.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    h = linear(ad.gelu(linear(h, p, f"{prefix}.mlp.fc1")), p, f"{prefix}.mlp.fc2")
    return ad.add(x, h)


def _as_batch(x, d_in: int, T: int, what: str) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (2, 3) or x.shape[-2:] != (T, d_in):
        raise DimensionError(f"{what} input has shape {x.shape}, expected (..., {T}, {d_in})")
    return ad.reshape(x, (1, T, d_in)) if x.ndim == 2 else x


def _encode(x, params: ModelParams, enc: str, d_in: int, n_layers: int) -> Tensor:
    cfg = params.config
    x = _as_batch(x, d_in, cfg.seq_len, enc.split("_")[0])
    h = ad.add(linear(x, params, f"{enc}.in_proj"), params[f"{enc}.pos"])
    for i in range(n_layers):
        h = block(h, params, f"{enc}.layers.{i}")
    return ad.layer_norm(h, params[f"{enc}.ln_f.gain"], params[f"{enc}.ln_f.bias"])


def encode_audio(audio, params: ModelParams) -> Tensor:
    """``[B, T, d_audio_in]`` (or one ``[T, d_audio_in]`` clip) to ``[B, T, d_model]``."""
    cfg = params.config
    return _encode(audio, params, "audio_encoder", cfg.d_audio_in, cfg.n_enc_layers_audio)


def encode_vision(video, params: ModelParams) -> Tensor:
    cfg = params.config
    return _encode(video, params, "vision_encoder", cfg.d_vision_in, cfg.n_enc_layers_vision)


def attention_mask(n_prefix: int, n_prompt: int) -> np.ndarray:
    """Additive mask: prefix is bidirectional, prompt is causal over itself."""
    L = n_prefix + n_prompt
    allowed = np.zeros((L, L), dtype=bool)
    allowed[:n_prefix, :n_prefix] = True
    allowed[n_prefix:, :n_prefix] = True
    allowed[n_prefix:, n_prefix:] = np.tril(np.ones((n_prompt, n_prompt), dtype=bool))
    return np.where(allowed, 0.0, -1e9)


def forward_batch(audio, video, prompt: PromptTemplate, params: ModelParams) -> Tensor:
    """Answer-position logits ``[B, n_vocab]`` for a batch of clips."""
    cfg = params.config
    ids = prompt.token_ids(cfg.vocab)
    P = len(ids)
    if P > cfg.max_prompt_len:
        raise DimensionError(f"prompt of {P} tokens exceeds max_prompt_len={cfg.max_prompt_len}")
    a = encode_audio(audio, params)
    v = encode_vision(video, params)
    if a.shape[0] != v.shape[0]:
        raise DimensionError(f"audio batch {a.shape[0]} != video batch {v.shape[0]}")
    B, T = a.shape[0], cfg.seq_len
    E = params.tensors
    types, frame_pos = E["embedding.types"], E["embedding.frame_pos"]
    a = ad.add(ad.add(a, ad.take(types, 0)), frame_pos)
    v = ad.add(ad.add(v, ad.take(types, 1)), frame_pos)
    tok = ad.add(ad.add(ad.embedding(E["embedding.tokens"], ids), ad.take(types, 2)),
                 ad.take(E["embedding.prompt_pos"], slice(0, P)))
    tok = ad.add(Tensor(np.zeros((B, 1, 1))), tok)
    x = ad.concat([a, v, tok], axis=1)

    mask = attention_mask(2 * T, P)
    ans = 2 * T + prompt.answer_position(cfg.vocab)
    for i in range(cfg.n_dec_layers):
        last = i == cfg.n_dec_layers - 1
        x = block(x, params, f"decoder.layers.{i}", mask, rows=slice(ans, ans + 1) if last else None)
    if cfg.n_dec_layers == 0:
        x = ad.take(x, (slice(None), slice(ans, ans + 1)))
    h = ad.layer_norm(x, E["decoder.ln_f.gain"], E["decoder.ln_f.bias"])
    logits = linear(h, params, "embedding.head")
    return ad.reshape(logits, (B, len(cfg.vocab)))


def forward(sample, prompt: PromptTemplate, params: ModelParams) -> Tensor:
    """Answer-position logits ``[n_vocab]`` for one :class:`~avdetect.data.AvSample`."""
    out = forward_batch(sample.audio, sample.video, prompt, params)
    return ad.reshape(out, (out.shape[1],))
