"""Scoring task suites into an evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .prompts import assemble_prompt
from .records import AnswerMode, SuiteSpec, TaskRecord
from .scoring import COT_MARKER, exact_match, extract_answer, normalized_score

GenerateFn = Callable[[Sequence[str]], Sequence[str]]


@dataclass(frozen=True)
class DecodeConfig:
    max_new_tokens: int = 32
    batch_size: int = 64
    case_sensitive: bool = True
    cot_marker: str = COT_MARKER


@dataclass
class TaskScore:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0


@dataclass
class EvalReport:
    per_task: dict[str, TaskScore]
    suites: list[SuiteSpec]
    metadata: dict = field(default_factory=dict)

    def suite_accuracy(self, suite: SuiteSpec) -> float:
        """Unweighted mean accuracy over the suite's tasks."""
        return sum(self.per_task[t].accuracy for t in suite.tasks) / len(suite.tasks)

    def suite_normalized(self, suite: SuiteSpec) -> float:
        scores = [normalized_score(self.per_task[t].accuracy, suite.baseline(t)) for t in suite.tasks]
        return sum(scores) / len(scores)

    @property
    def normalized_average(self) -> float:
        if not self.suites:
            return 0.0
        return sum(self.suite_normalized(s) for s in self.suites) / len(self.suites)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "per_task": {
                t: {"accuracy": s.accuracy, "correct": s.correct, "total": s.total}
                for t, s in sorted(self.per_task.items())
            },
            "suites": [
                {
                    **s.to_dict(),
                    "accuracy": self.suite_accuracy(s),
                    "normalized": self.suite_normalized(s),
                }
                for s in self.suites
            ],
            "normalized_average": self.normalized_average,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        per_task = {t: TaskScore(v["correct"], v["total"]) for t, v in d["per_task"].items()}
        suites = [SuiteSpec.from_dict(s) for s in d["suites"]]
        return cls(per_task, suites, dict(d.get("metadata", {})))


def format_table(rows: Sequence[tuple[str, EvalReport]], title: str = "Model") -> str:
    """Aligned plain-text table: one column per suite, then the normalized average."""
    if not rows:
        return ""
    suites = rows[0][1].suites
    header = [title] + [s.label for s in suites] + ["Norm. Avg."]
    body = []
    for name, rep in rows:
        body.append([name] + [f"{rep.suite_accuracy(s):.1f}" for s in suites] + [f"{rep.normalized_average:.1f}"])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return " | ".join([first] + rest)

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in body]) + "\n"


def score_task(
    records: Sequence[TaskRecord], generations: Sequence[str], decode: DecodeConfig = DecodeConfig()
) -> TaskScore:
    correct = 0
    for rec, gen in zip(records, generations, strict=True):
        pred = extract_answer(gen, rec.answer_mode, decode.cot_marker)
        gold = extract_answer(rec.target, rec.answer_mode, decode.cot_marker)
        correct += exact_match(pred, gold, decode.case_sensitive)
    return TaskScore(correct, len(records))


def evaluate(
    generate: GenerateFn,
    suites: Sequence[SuiteSpec],
    tasks: Mapping[str, Sequence[TaskRecord]],
    decode: DecodeConfig = DecodeConfig(),
    metadata: Mapping | None = None,
) -> EvalReport:
    """Score every task named by ``suites``; tasks are visited in suite order."""
    per_task: dict[str, TaskScore] = {}
    for suite in suites:
        for name in suite.tasks:
            if name in per_task:
                continue
            if name not in tasks:
                raise KeyError(f"suite {suite.name}: task {name!r} not loaded")
            records = list(tasks[name])
            prompts = [assemble_prompt(r, suite.k_shot) for r in records]
            gens = list(generate(prompts))
            per_task[name] = score_task(records, gens, decode)
    meta = dict(metadata or {})
    meta.setdefault("k_shot", {s.name: s.k_shot for s in suites})
    return EvalReport(per_task, list(suites), meta)


def stub_generator(records: Mapping[str, Sequence[TaskRecord]], k_by_task: Mapping[str, int] | None = None):
    """Generator that answers every known prompt with its target verbatim."""
    answers = {}
    for name, recs in records.items():
        for r in recs:
            k = None if k_by_task is None else k_by_task.get(name)
            answers[assemble_prompt(r, k)] = r.target
    return lambda prompts: [answers.get(p, "") for p in prompts]
