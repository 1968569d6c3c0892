"""Run configuration: one canonical JSON document describing a run."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SPLITS, CorpusConfigError, CorpusSpec
from .model import ModelConfig
from .training import Stage, StagePlan, full_stage, lora_stage

EVAL_SPLITS = SPLITS[1:]


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is the dotted path at fault."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    seed: int = 42
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: str = "two-stage"
    stage1: Stage = field(default_factory=lora_stage)
    stage2: Stage = field(default_factory=full_stage)
    eval_splits: tuple = EVAL_SPLITS
    ablation_seeds: tuple = (41, 42, 43, 44, 45)
    out: str = "avdetect-out"
    threads: int = 1

    def stage_plan(self, name: str | None = None) -> StagePlan:
        return StagePlan.preset(name or self.plan, self.stage1, self.stage2)

    def model_config(self, seed: int | None = None) -> ModelConfig:
        """Model config whose initialisation seed follows the run seed."""
        return dataclasses.replace(self.model, seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        model.pop("seed")
        return {"seed": self.seed, "corpus": self.corpus.to_dict(), "model": model,
                "plan": self.plan, "stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict(),
                "eval_splits": list(self.eval_splits), "ablation_seeds": list(self.ablation_seeds),
                "out": self.out, "threads": self.threads}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        base = cls()
        kw = {}
        for key in ("seed", "threads"):
            if key in d:
                if not isinstance(d[key], int) or isinstance(d[key], bool):
                    raise ConfigError(key, "must be an integer")
                kw[key] = d[key]
        if kw.get("threads", 1) < 1:
            raise ConfigError("threads", "must be at least 1")
        if "corpus" in d:
            try:
                kw["corpus"] = CorpusSpec.from_dict(_obj(d, "corpus"))
            except CorpusConfigError as exc:
                raise ConfigError("corpus." + str(exc).split(":")[0], str(exc)) from None
            except TypeError as exc:
                raise ConfigError("corpus", str(exc)) from None
        if "model" in d:
            try:
                kw["model"] = ModelConfig.from_dict(_obj(d, "model"))
            except (TypeError, ValueError) as exc:
                raise ConfigError("model", str(exc)) from None
        for key in ("stage1", "stage2"):
            if key in d:
                try:
                    kw[key] = Stage(**(getattr(base, key).to_dict() | _obj(d, key)))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(key, str(exc)) from None
        if "plan" in d:
            if d["plan"] not in StagePlan.PRESETS:
                raise ConfigError("plan", f"must be one of {StagePlan.PRESETS}")
            kw["plan"] = d["plan"]
        if "eval_splits" in d:
            bad = [s for s in d["eval_splits"] if s not in EVAL_SPLITS]
            if bad or not isinstance(d["eval_splits"], list):
                raise ConfigError("eval_splits", f"unknown splits {bad}")
            kw["eval_splits"] = tuple(d["eval_splits"])
        if "ablation_seeds" in d:
            seeds = d["ablation_seeds"]
            if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
                raise ConfigError("ablation_seeds", "must be a nonempty list of integers")
            kw["ablation_seeds"] = tuple(seeds)
        if "out" in d:
            if not isinstance(d["out"], str):
                raise ConfigError("out", "must be a path string")
            kw["out"] = d["out"]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)


def _obj(d: dict, key: str) -> dict:
    if not isinstance(d[key], dict):
        raise ConfigError(key, "must be an object")
    return d[key]
