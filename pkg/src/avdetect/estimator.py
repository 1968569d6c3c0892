"""scikit-learn style wrapper around staged fine-tuning.

Each row of ``X`` is one clip flattened as ``audio.ravel()`` followed by
``video.ravel()``; :func:`pack_clips` and :func:`unpack_clips` convert.  The
larger class label (``classes_[1]``) plays the role of ``Fake``.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import FAKE, REAL, Split
from .metrics import two_token_batch
from .model import ModelConfig, PromptTemplate, forward_batch, init_params
from .training import FinetuneDataset, StagePlan, full_stage, lora_stage, train_stage


def pack_clips(audio: np.ndarray, video: np.ndarray) -> np.ndarray:
    """``[n, T, d_a]`` and ``[n, T, d_v]`` to a ``[n, T*(d_a+d_v)]`` design matrix."""
    audio, video = np.asarray(audio, dtype=np.float64), np.asarray(video, dtype=np.float64)
    if audio.ndim != 3 or video.ndim != 3 or audio.shape[:2] != video.shape[:2]:
        raise ValueError(f"audio {audio.shape} and video {video.shape} must be [n, T, d] with matching n, T")
    n = audio.shape[0]
    return np.concatenate([audio.reshape(n, -1), video.reshape(n, -1)], axis=1)


def unpack_clips(X: np.ndarray, seq_len: int, d_audio: int, d_vision: int):
    n_audio = seq_len * d_audio
    if X.shape[1] != seq_len * (d_audio + d_vision):
        raise ValueError(f"X has {X.shape[1]} features, expected {seq_len * (d_audio + d_vision)} "
                         f"(= {seq_len} x ({d_audio} + {d_vision}))")
    return (X[:, :n_audio].reshape(-1, seq_len, d_audio),
            X[:, n_audio:].reshape(-1, seq_len, d_vision))


class AVDeepfakeClassifier(ClassifierMixin, BaseEstimator):
    """Binary real/fake classifier trained through the answer token.

    Parameters mirror the run configuration: the stage plan preset, step
    counts and learning rates of the two stages, LoRA rank/alpha, and the
    model width.  ``random_state`` seeds initialisation and batch order.
    """

    def __init__(self, plan="two-stage", stage1_steps=300, stage2_steps=1200, stage1_lr=3e-3,
                 stage2_lr=1e-3, batch_size=32, lora_rank=4, lora_alpha=8.0, d_model=64,
                 n_heads=4, seq_len=32, d_audio=16, d_vision=24, random_state=42, threads=1):
        self.plan = plan
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.batch_size = batch_size
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.d_model = d_model
        self.n_heads = n_heads
        self.seq_len = seq_len
        self.d_audio = d_audio
        self.d_vision = d_vision
        self.random_state = random_state
        self.threads = threads

    def _model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, d_audio_in=self.d_audio,
                           d_vision_in=self.d_vision, seq_len=self.seq_len, seed=self.random_state)

    def _stage_plan(self) -> StagePlan:
        s1 = lora_stage(self.stage1_steps, self.stage1_lr, self.batch_size,
                        lora_rank=self.lora_rank, lora_alpha=self.lora_alpha)
        s2 = full_stage(self.stage2_steps, self.stage2_lr, self.batch_size)
        return StagePlan.preset(self.plan, s1, s2)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {len(self.classes_)}")
        self.n_features_in_ = X.shape[1]
        audio, video = unpack_clips(X, self.seq_len, self.d_audio, self.d_vision)
        labels = np.where(y == self.classes_[1], FAKE, REAL).astype(np.int64)
        n = len(labels)
        ids = np.arange(n, dtype=np.int64)
        split = Split("fit", audio, video, labels, ["none" if l == REAL else "unknown" for l in labels],
                      np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), ids)
        config = self._model_config()
        dataset = FinetuneDataset.from_split(split, PromptTemplate(), config.vocab)
        params = init_params(config)
        self.loss_curve_ = []
        for k, stage in enumerate(self._stage_plan().stages, start=1):
            stage = dataclasses.replace(stage, batch_size=min(stage.batch_size, n))
            params, trace = train_stage(stage, dataset, params, seed=self.random_state, tag=k,
                                        threads=self.threads)
            self.loss_curve_.extend(trace)
        self.params_ = params
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but the estimator was fitted with "
                             f"{self.n_features_in_}")
        audio, video = unpack_clips(X, self.seq_len, self.d_audio, self.d_vision)
        prompt = PromptTemplate()
        parts = [forward_batch(audio[i:i + 256], video[i:i + 256], prompt, self.params_).data
                 for i in range(0, len(X), 256)]
        return np.concatenate(parts)

    def predict_proba(self, X) -> np.ndarray:
        """Columns follow ``classes_``: ``P(real)``, ``P(fake)`` from the two answer logits."""
        logits = self._logits(X)
        vocab = self.params_.config.vocab
        p_fake = two_token_batch(logits, vocab.real_id, vocab.fake_id)
        return np.column_stack([1.0 - p_fake, p_fake])

    def decision_function(self, X) -> np.ndarray:
        """``logit(Fake) - logit(Real)``; positive means the second class."""
        logits = self._logits(X)
        vocab = self.params_.config.vocab
        return logits[:, vocab.fake_id] - logits[:, vocab.real_id]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[(self.predict_proba(X)[:, 1] > 0.5).astype(int)]
