"""Command-line entry points.

Every command resolves its configuration (defaults, ``--config`` file,
``--set`` overrides, ``--seed``), writes the snapshot to ``<out>/config.yaml``
and keeps wall-clock data in ``<out>/run_info.json`` only. Failures print a
single JSON line ``{"error": ..., "message": ..., "command": ...}`` to stderr
and exit with status 1.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import routing
from .config import (
    decode_config,
    dump_yaml,
    model_config,
    resolve_config,
    synthetic_spec,
    train_config,
)
from .evalkit.report import EvalReport, evaluate, format_table
from .evalkit.synthetic import TaskSet, build_synthetic, gen_synthetic_tasks, load_task_dir
from .experiments import run_ablation, run_sweep, run_transfer
from .model import load_checkpoint, save_checkpoint, transformer_stack
from .training import average_checkpoints, greedy_generate, train


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # noqa: BLE001 - every failure becomes one record
            ctx = click.get_current_context(silent=True)
            name = ctx.info_name if ctx is not None else fn.__name__
            record = {"command": name, "error": type(exc).__name__, "message": str(exc)}
            click.echo(json.dumps(record, sort_keys=True), err=True)
            sys.exit(1)

    return wrapper


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)(fn)
    return fn


def _start(out_dir, config_path, overrides, seed, command: str) -> tuple[dict, Path]:
    if config_path is not None and not Path(config_path).is_file():
        raise FileNotFoundError(f"config file not found: {config_path}")
    cfg = resolve_config(config_path, overrides, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_yaml(cfg), encoding="utf-8")
    _sidecar(out, command, started=time.time())
    return cfg, out


def _sidecar(out: Path, command: str, **stamps) -> None:
    path = out / "run_info.json"
    info = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {"command": command}
    info.update(stamps)
    path.write_text(json.dumps(info, sort_keys=True) + "\n", encoding="utf-8")


def _finish(out: Path, command: str) -> None:
    _sidecar(out, command, finished=time.time())


def load_tasks(cfg) -> TaskSet:
    if cfg["tasks"]["dir"]:
        return load_task_dir(cfg["tasks"]["dir"])
    return build_synthetic(cfg["seed"], synthetic_spec(cfg))


def _write_report(out: Path, report: EvalReport, name: str = "report") -> None:
    (out / f"{name}.json").write_text(report.to_json(), encoding="utf-8")
    (out / f"{name}.txt").write_text(format_table([(name, report)]), encoding="utf-8")


@click.group()
def main():
    """Sparse mixture-of-experts lab."""


@main.command("gen-tasks")
@_common
@_guard
def gen_tasks(config_path, overrides, seed, out_dir):
    """Write synthetic task files and a manifest."""
    cfg, out = _start(out_dir, config_path, overrides, seed, "gen-tasks")
    gen_synthetic_tasks(cfg["seed"], synthetic_spec(cfg), out / "tasks")
    _finish(out, "gen-tasks")


@main.command("train")
@_common
@click.option("--from", "from_ckpt", type=click.Path(dir_okay=False), default=None, help="initial checkpoint")
@_guard
def train_cmd(config_path, overrides, seed, out_dir, from_ckpt):
    """Train on the configured mixture (or continue from a checkpoint)."""
    cfg, out = _start(out_dir, config_path, overrides, seed, "train")
    tasks = load_tasks(cfg)
    tok = tasks.tokenizer()
    names = cfg["train"]["tasks"] or tasks.held_in()
    missing = [n for n in names if n not in tasks.train]
    if missing:
        raise KeyError(f"unknown training tasks: {missing}")
    mixture = {n: tasks.train[n] for n in names}
    init = None
    if from_ckpt is not None:
        mcfg, init, _ = load_checkpoint(from_ckpt)
    else:
        mcfg = model_config(cfg, len(tok))
    train(mcfg, train_config(cfg), mixture, tok, out, init)
    _finish(out, "train")


@main.command("eval")
@_common
@click.option("--from", "from_ckpt", type=click.Path(dir_okay=False), required=True)
@_guard
def eval_cmd(config_path, overrides, seed, out_dir, from_ckpt):
    """Greedy-decode every configured suite and write report.json / report.txt."""
    cfg, out = _start(out_dir, config_path, overrides, seed, "eval")
    tasks = load_tasks(cfg)
    tok = tasks.tokenizer()
    mcfg, params, meta = load_checkpoint(from_ckpt)
    dec = decode_config(cfg)

    def gen(prompts):
        return greedy_generate(params, mcfg, tok, prompts, dec.max_new_tokens, dec.batch_size)

    report = evaluate(gen, tasks.suites, tasks.test, dec, {"checkpoint": Path(from_ckpt).name, "seed": cfg["seed"]})
    _write_report(out, report)
    click.echo(format_table([("model", report)]), nl=False)
    _finish(out, "eval")


@main.command("route-trace")
@_common
@click.option("--probs", "probs_path", type=click.Path(dir_okay=False), default=None, help="JSON routing fixture")
@click.option("--from", "from_ckpt", type=click.Path(dir_okay=False), default=None)
@click.option("--text", default=None, help="text to route through a checkpoint")
@_guard
def route_trace(config_path, overrides, seed, out_dir, probs_path, from_ckpt, text):
    """Dump one routing record per token.

    With ``--probs`` the fixture holds ``probs`` (token-choice) or ``scores``
    (expert-choice) and an optional ``capacity``; the strategy comes from
    ``model.router``. With ``--from`` and ``--text`` every MoE layer is traced.
    """
    cfg, out = _start(out_dir, config_path, overrides, seed, "route-trace")
    if (probs_path is None) == (from_ckpt is None):
        raise ValueError("give exactly one of --probs or --from")
    lines = []
    if probs_path is not None:
        fixture = json.loads(Path(probs_path).read_text(encoding="utf-8"))
        rc = model_config(cfg, 1).router
        key = "scores" if "scores" in fixture else "probs"
        matrix = np.asarray(fixture[key], dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("fixture needs a 2-d 'probs' or 'scores' matrix")
        if matrix.shape[1] != rc.num_experts:
            rc = routing.RouterConfig(**{**rc.to_dict(), "num_experts": matrix.shape[1], "top_k": None})
        cap = int(fixture.get("capacity", routing.capacity(matrix.shape[0], rc)))
        if rc.strategy.is_token_choice:
            plan = routing.route_token_choice(matrix, rc.top_k, cap)
        else:
            plan = routing.route_expert_choice(matrix, cap, fixture.get("probs") if key == "scores" else None)
        lines = routing.trace_records(plan)
    else:
        if text is None:
            raise ValueError("--from needs --text")
        tok = load_tasks(cfg).tokenizer()
        mcfg, params, _ = load_checkpoint(from_ckpt)
        ids = np.asarray([tok.encode(text)[-mcfg.max_len:]], dtype=np.int64)
        result = transformer_stack(ids, params, mcfg)
        for layer, plan in sorted(result.plans.items()):
            lines.extend({"layer": layer, **r} for r in routing.trace_records(plan))
    with (out / "route_trace.jsonl").open("w", encoding="utf-8") as fh:
        for r in lines:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _finish(out, "route-trace")


@main.command()
@_common
@click.option("--study", type=click.Choice(["freeze", "transfer", "sweep"]), default="freeze")
@_guard
def ablate(config_path, overrides, seed, out_dir, study):
    """Run the freeze/aux-loss grid, the transfer comparison or the lr/batch sweep."""
    cfg, out = _start(out_dir, config_path, overrides, seed, "ablate")
    tasks = load_tasks(cfg)
    mcfg = model_config(cfg, len(tasks.tokenizer()))
    tcfg = train_config(cfg)
    if study == "freeze":
        res = run_ablation(tasks, mcfg, tcfg, cfg["ablate"]["base_steps"], out_dir=out / "runs")
        table = res.table()
        (out / "ablation.json").write_text(
            json.dumps({label: r.to_dict() for label, r in res.rows}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out / "ablation_table.txt").write_text(table, encoding="utf-8")
    elif study == "transfer":
        t = cfg["transfer"]
        res = run_transfer(
            tasks, mcfg, tcfg, t["instruction_steps"], t["finetune_steps"], t["seeds"], t["include_dense"], out / "runs"
        )
        table = res.table()
        (out / "transfer.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "transfer_table.txt").write_text(table, encoding="utf-8")
    else:
        s = cfg["sweep"]
        rows = run_sweep(tasks, mcfg, tcfg, s["learning_rates"], s["batch_sizes"], out / "runs")
        table = "".join(f"lr={r['learning_rate']:g} batch={r['batch_size']} final_loss={r['final_loss']:.4f}\n" for r in rows)
        (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "sweep_table.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    _finish(out, "ablate")


@main.command("average-ckpt")
@_common
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(dir_okay=False))
@_guard
def average_ckpt(config_path, overrides, seed, out_dir, checkpoints):
    """Average checkpoints elementwise into ``<out>/averaged.ckpt``."""
    cfg, out = _start(out_dir, config_path, overrides, seed, "average-ckpt")
    mcfg, params = average_checkpoints(list(checkpoints))
    save_checkpoint(out / "averaged.ckpt", mcfg, params, {"averaged": [Path(c).name for c in checkpoints]})
    _finish(out, "average-ckpt")


@main.command()
@_common
@click.argument("reports", nargs=-1, required=True, type=click.Path(dir_okay=False))
@_guard
def report(config_path, overrides, seed, out_dir, reports):
    """Combine report.json files into one aligned table (rows named by parent directory)."""
    cfg, out = _start(out_dir, config_path, overrides, seed, "report")
    rows = []
    for path in reports:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rows.append((Path(path).parent.name or Path(path).stem, EvalReport.from_dict(data)))
    table = format_table(rows)
    (out / "table.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    _finish(out, "report")


if __name__ == "__main__":
    main()
