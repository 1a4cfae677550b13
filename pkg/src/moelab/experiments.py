"""Multi-run studies: the freeze/aux-loss ablation grid and the transfer comparison.

Transfer setups, all scored on the held-out tasks:

* ``single_task``: fresh model finetuned on one held-out task's small split.
* ``instruction_tuned``: model trained on the held-in mixture, prompted directly.
* ``instruction_tuned_ft``: the same model, then finetuned like ``single_task``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .evalkit.records import SuiteSpec
from .evalkit.report import EvalReport, TaskScore, evaluate, format_table
from .evalkit.synthetic import TaskSet
from .model import ModelConfig, ModelParams, MoEPattern
from .routing import AuxLoss
from .training import FreezeMode, TrainConfig, model_generator, train

# from-scratch desk-scale rate; the 1e-4 default assumes a pretrained model
DESK_LEARNING_RATE = 3e-3

ABLATION_ROWS: tuple[tuple[str, FreezeMode, AuxLoss], ...] = (
    ("Baseline", FreezeMode.NONE, AuxLoss.NONE),
    ("Freeze-Gate", FreezeMode.FREEZE_GATE, AuxLoss.NONE),
    ("Freeze-Expert", FreezeMode.FREEZE_EXPERT, AuxLoss.NONE),
    ("Freeze-MoE", FreezeMode.FREEZE_MOE, AuxLoss.NONE),
    ("Z-loss", FreezeMode.NONE, AuxLoss.ZLOSS),
    ("Balance-loss", FreezeMode.NONE, AuxLoss.BALANCE),
)

SETUPS = ("single_task", "instruction_tuned", "instruction_tuned_ft")


def with_aux(cfg: ModelConfig, aux: AuxLoss) -> ModelConfig:
    return dataclasses.replace(cfg, router=dataclasses.replace(cfg.router, aux_loss=aux))


def dense_config(cfg: ModelConfig) -> ModelConfig:
    return dataclasses.replace(cfg, moe_pattern=MoEPattern.NONE)


def _sub(out_dir, *parts) -> Path | None:
    return None if out_dir is None else Path(out_dir).joinpath(*parts)


# -- ablation grid ----------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: list[tuple[str, EvalReport]]
    params: dict[str, ModelParams]
    base: ModelParams

    def table(self) -> str:
        return format_table(self.rows, title="Finetuning Strategy")


def run_ablation(
    tasks: TaskSet,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    base_steps: int,
    suites: Sequence[SuiteSpec] | None = None,
    out_dir=None,
) -> AblationResult:
    """Train a shared base on the held-in mixture, then finetune it once per row.

    Each row changes only the freeze mode or the auxiliary loss; all rows
    share the base weights, seed and batch stream.
    """
    tok = tasks.tokenizer()
    mixture = {n: tasks.train[n] for n in tasks.held_in()}
    base_cfg = dataclasses.replace(tcfg, steps=base_steps, freeze_mode=FreezeMode.NONE)
    base = train(mcfg, base_cfg, mixture, tok, _sub(out_dir, "base")).params
    suites = list(suites if suites is not None else tasks.suites)
    rows, finals = [], {}
    for label, freeze, aux in ABLATION_ROWS:
        cfg = with_aux(mcfg, aux)
        run = train(cfg, dataclasses.replace(tcfg, freeze_mode=freeze), mixture, tok, _sub(out_dir, label), base)
        meta = {"row": label, "seed": tcfg.seed, "freeze_mode": freeze.value, "aux_loss": aux.value}
        rows.append((label, evaluate(model_generator(run.params, cfg, tok), suites, tasks.test, metadata=meta)))
        finals[label] = run.params
    return AblationResult(rows, finals, base)


# -- transfer study ---------------------------------------------------------------------


def held_out_suites(tasks: TaskSet) -> list[SuiteSpec]:
    out = set(tasks.held_out())
    return [s for s in tasks.suites if set(s.tasks) <= out]


def _merge(reports: Sequence[EvalReport], suites, meta) -> EvalReport:
    per_task: dict[str, TaskScore] = {}
    for r in reports:
        per_task.update(r.per_task)
    return EvalReport(per_task, list(suites), dict(meta))


@dataclass
class TransferResult:
    # reports[arch][setup] is one report per seed
    reports: dict[str, dict[str, list[EvalReport]]] = field(default_factory=dict)

    def mean_score(self, arch: str, setup: str) -> float:
        reps = self.reports[arch][setup]
        return sum(r.normalized_average for r in reps) / len(reps)

    def rows(self) -> list[tuple[str, float, list[float]]]:
        out = []
        for arch in self.reports:
            for setup in SETUPS:
                reps = self.reports[arch][setup]
                out.append((f"{arch}/{setup}", self.mean_score(arch, setup), [r.normalized_average for r in reps]))
        return out

    def table(self) -> str:
        lines = ["Model/Setup | Held-out Norm. Avg. (mean) | per seed"]
        for name, mean, per in self.rows():
            lines.append(f"{name} | {mean:.1f} | " + ", ".join(f"{x:.1f}" for x in per))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            arch: {setup: [r.to_dict() for r in reps] for setup, reps in by_setup.items()}
            for arch, by_setup in self.reports.items()
        }


def run_transfer(
    tasks: TaskSet,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    instruction_steps: int,
    finetune_steps: int,
    seeds: Sequence[int],
    include_dense: bool = True,
    out_dir=None,
) -> TransferResult:
    tok = tasks.tokenizer()
    suites = held_out_suites(tasks)
    targets = [t for s in suites for t in s.tasks]
    mixture = {n: tasks.train[n] for n in tasks.held_in()}
    archs = {"moe": mcfg}
    if include_dense:
        archs["dense"] = dense_config(mcfg)
    result = TransferResult()
    for arch, cfg in archs.items():
        by_setup: dict[str, list[EvalReport]] = {s: [] for s in SETUPS}
        for seed in seeds:
            meta = {"arch": arch, "seed": seed}
            it_cfg = dataclasses.replace(tcfg, seed=seed, steps=instruction_steps)
            it = train(cfg, it_cfg, mixture, tok, _sub(out_dir, arch, f"seed{seed}", "instruction")).params
            gen = model_generator(it, cfg, tok)
            by_setup["instruction_tuned"].append(
                evaluate(gen, suites, tasks.test, metadata={**meta, "setup": "instruction_tuned"})
            )
            ft_cfg = dataclasses.replace(tcfg, seed=seed, steps=finetune_steps)
            for setup, init in (("single_task", None), ("instruction_tuned_ft", it)):
                per_task = []
                for t in targets:
                    run = train(cfg, ft_cfg, {t: tasks.train[t]}, tok, _sub(out_dir, arch, f"seed{seed}", setup, t), init)
                    only = [SuiteSpec(s.name, (t,), s.k_shot, s.answer_mode, s.random_baseline) for s in suites if t in s.tasks]
                    per_task.append(evaluate(model_generator(run.params, cfg, tok), only, {t: tasks.test[t]}))
                by_setup[setup].append(_merge(per_task, suites, {**meta, "setup": setup}))
        result.reports[arch] = by_setup
    return result


# -- sensitivity sweep ------------------------------------------------------------------


def run_sweep(
    tasks: TaskSet,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    learning_rates: Sequence[float],
    batch_sizes: Sequence[int],
    out_dir=None,
) -> list[dict]:
    """Final-window training loss for each (learning rate, batch size); nothing is asserted."""
    tok = tasks.tokenizer()
    mixture = {n: tasks.train[n] for n in tasks.held_in()}
    rows = []
    for lr in learning_rates:
        for bs in batch_sizes:
            cfg = dataclasses.replace(tcfg, learning_rate=lr, batch_size=bs)
            run = train(mcfg, cfg, mixture, tok, _sub(out_dir, f"lr{lr:g}_bs{bs}"))
            tail = [m["loss"] for m in run.metrics[-max(1, len(run.metrics) // 10):]]
            rows.append({"learning_rate": lr, "batch_size": bs, "final_loss": sum(tail) / len(tail)})
    return rows
