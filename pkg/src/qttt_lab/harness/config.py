"""Experiment configuration: one JSON document per run.

Example::

    {
      "task": {"kind": "transactions", "lengths": [4, 8, 16], "seeds": [0, 1, 2],
               "bug_types": ["CALC_ERROR", "NEGATIVE_BAL"], "n_accounts": 2,
               "prompt_style": "compact"},
      "checkpoint": "base_model.ckpt",
      "adaptation": {"n_steps": 8, "span_len": 32, "lr": 0.001},
      "conditions": [{"kind": "in_context"}, {"kind": "thinking"},
                     {"kind": "qttt"}, {"kind": "bon", "n_samples": 4}],
      "answer_budget": 64,
      "seed": 0,
      "out_dir": "results"
    }

``thinking`` and ``bon`` default to ``2 * n_steps * span_len`` tokens, the
qTTT-matched budget.  A relative ``checkpoint`` or ``dataset`` path is
resolved against the config file's directory.  ``task.dataset`` (a JSONL
file) may replace the generated sweep.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..diagnostics import BON, QTTT, THINKING, Condition
from ..qttt import AdaptationConfig
from ..tasks import (
    ALL_TYPES,
    BUG_TYPES,
    CODE,
    TRANSACTIONS,
    gen_code_needle_task,
    gen_transaction_task,
    read_jsonl,
    record_from_task,
)

OUT_ENV = "QTTT_LAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = TRANSACTIONS
    lengths: tuple[int, ...] = (8,)
    seeds: tuple[int, ...] = (0,)
    bug_types: tuple[str, ...] = BUG_TYPES
    n_accounts: int = 2
    prompt_style: str = "compact"
    dataset: str | None = None

    def __post_init__(self):
        if self.kind not in (TRANSACTIONS, CODE):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        bad = [b for b in self.bug_types if b not in ALL_TYPES]
        if bad:
            raise ConfigError(f"unknown bug types {bad}")

    def records(self, base_dir: Path | None = None):
        if self.dataset is not None:
            path = Path(self.dataset)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            return read_jsonl(path)
        out = []
        for length in self.lengths:
            for s in self.seeds:
                if self.kind == TRANSACTIONS:
                    bug = self.bug_types[s % len(self.bug_types)]
                    task = gen_transaction_task(length, self.n_accounts, bug, s, allow_wide=True)
                else:
                    task = gen_code_needle_task(length, s)
                out.append(record_from_task(task))
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec
    checkpoint: str
    adaptation: AdaptationConfig
    conditions: tuple[Condition, ...]
    answer_budget: int = 64
    seed: int = 0
    out_dir: str = "results"
    base_dir: str | None = field(default=None, compare=False)

    @property
    def matched_tokens(self) -> int:
        return 2 * self.adaptation.n_steps * self.adaptation.span_len

    def checkpoint_path(self) -> Path:
        p = Path(self.checkpoint)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def output_dir(self, override: str | None = None) -> Path:
        return Path(override or os.environ.get(OUT_ENV) or self.out_dir)

    def to_dict(self) -> dict:
        conds = []
        for c in self.conditions:
            d = {"kind": c.kind}
            if c.kind in (THINKING, BON):
                d["think_tokens"] = c.think_tokens
            if c.kind == BON:
                d["n_samples"] = c.n_samples
                d["temperature"] = c.temperature
            conds.append(d)
        task = asdict(self.task)
        task["lengths"] = list(task["lengths"])
        task["seeds"] = list(task["seeds"])
        task["bug_types"] = list(task["bug_types"])
        return {
            "task": task,
            "checkpoint": self.checkpoint,
            "adaptation": asdict(self.adaptation),
            "conditions": conds,
            "answer_budget": self.answer_budget,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | None = None) -> "ExperimentConfig":
        known = {"task", "checkpoint", "adaptation", "conditions", "answer_budget", "seed", "out_dir"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "checkpoint" not in data:
            raise ConfigError("config needs a checkpoint path")
        try:
            t = dict(data.get("task", {}))
            for key in ("lengths", "seeds", "bug_types"):
                if key in t:
                    t[key] = tuple(t[key])
            task = TaskSpec(**t)
            adaptation = AdaptationConfig(**data.get("adaptation", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        matched = 2 * adaptation.n_steps * adaptation.span_len
        conds = []
        for c in data.get("conditions", [{"kind": "in_context"}]):
            c = dict(c)
            kind = c.pop("kind", None)
            if kind in (THINKING, BON):
                c.setdefault("think_tokens", matched)
            if kind == QTTT:
                c["adaptation"] = adaptation
            try:
                conds.append(Condition(kind, **c))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"condition {kind!r}: {exc}") from None
        if not conds:
            raise ConfigError("no conditions")
        return cls(
            task=task,
            checkpoint=data["checkpoint"],
            adaptation=adaptation,
            conditions=tuple(conds),
            answer_budget=int(data.get("answer_budget", 64)),
            seed=int(data.get("seed", 0)),
            out_dir=data.get("out_dir", "results"),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, base_dir=str(path.parent))
