"""Task records, suite definitions and JSON-lines task files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping


class AnswerMode(str, Enum):
    DIRECT = "Direct"
    COT = "CoT"


class TaskFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskRecord:
    task_name: str
    instruction: str
    input: str
    target: str
    exemplars: tuple[tuple[str, str], ...] = ()
    answer_mode: AnswerMode = AnswerMode.DIRECT

    def __post_init__(self):
        object.__setattr__(self, "answer_mode", AnswerMode(self.answer_mode))
        object.__setattr__(self, "exemplars", tuple((str(a), str(b)) for a, b in self.exemplars))
        if not self.target.strip():
            raise TaskFormatError(f"task {self.task_name!r}: empty target")

    def to_dict(self) -> dict:
        return {
            "task_name": self.task_name,
            "instruction": self.instruction,
            "input": self.input,
            "target": self.target,
            "exemplars": [list(e) for e in self.exemplars],
            "answer_mode": self.answer_mode.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TaskRecord:
        missing = {"task_name", "instruction", "input", "target"} - set(d)
        if missing:
            raise TaskFormatError(f"task record missing fields {sorted(missing)}")
        return cls(
            task_name=d["task_name"],
            instruction=d["instruction"],
            input=d["input"],
            target=d["target"],
            exemplars=tuple(tuple(e) for e in d.get("exemplars", ())),
            answer_mode=d.get("answer_mode", "Direct"),
        )


def write_task_file(path, records: Iterable[TaskRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    return path


def read_task_file(path) -> list[TaskRecord]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TaskRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TaskFormatError) as exc:
                raise TaskFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass(frozen=True)
class SuiteSpec:
    """A named group of tasks scored together.

    ``random_baseline`` maps task name to the accuracy (%) of random guessing;
    missing tasks default to 0 (free-form answers).
    """

    name: str
    tasks: tuple[str, ...]
    k_shot: int = 0
    answer_mode: AnswerMode = AnswerMode.DIRECT
    random_baseline: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "answer_mode", AnswerMode(self.answer_mode))
        object.__setattr__(self, "random_baseline", dict(self.random_baseline))
        for t, b in self.random_baseline.items():
            if not 0 <= b < 100:
                raise ValueError(f"suite {self.name}: baseline for {t} must be in [0, 100), got {b}")

    def baseline(self, task: str) -> float:
        return float(self.random_baseline.get(task, 0.0))

    @property
    def label(self) -> str:
        return f"{self.name} {self.answer_mode.value}"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tasks": list(self.tasks),
            "k_shot": self.k_shot,
            "answer_mode": self.answer_mode.value,
            "random_baseline": dict(sorted(self.random_baseline.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SuiteSpec:
        return cls(
            name=d["name"],
            tasks=tuple(d["tasks"]),
            k_shot=int(d.get("k_shot", 0)),
            answer_mode=d.get("answer_mode", "Direct"),
            random_baseline=d.get("random_baseline", {}),
        )
