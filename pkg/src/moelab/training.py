"""Prefix-LM finetuning: batching, Adam with role-based freezing, checkpoints.

Sequences are ``prompt + target + <eos>``. The model sees the sequence shifted
by one; the prompt is attended bidirectionally and only positions predicting
target tokens (and the closing eos) carry loss.

Randomness: step ``s`` draws its batch from ``Rng(seed).child("data", s)`` and
its dropout masks from ``Rng(seed).child("dropout", s)``, so any step can be
replayed from a checkpoint without re-running the ones before it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nt
from .evalkit.prompts import Tokenizer, assemble_prompt
from .evalkit.records import TaskRecord
from .model import (
    ModelConfig,
    ModelParams,
    Role,
    init_params,
    load_checkpoint,
    save_checkpoint,
    transformer_stack,
)
from .numerics import DiffTensor, Rng

IGNORE_ID = -100


class FreezeMode(str, Enum):
    NONE = "none"
    FREEZE_GATE = "freeze_gate"
    FREEZE_EXPERT = "freeze_expert"
    FREEZE_MOE = "freeze_moe"


class DegenerateBatchError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_mode: FreezeMode = FreezeMode.NONE
    seed: int = 0
    checkpoint_every: int = 0
    average_last_n: int = 1
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "freeze_mode", FreezeMode(self.freeze_mode))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("need 0 <= beta < 1 and eps > 0")
        if self.checkpoint_every < 0 or self.average_last_n < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every >= 0, average_last_n >= 1, log_every >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_mode"] = self.freeze_mode.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- batching ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # [B, S] model input
    targets: np.ndarray  # [B, S] next token, IGNORE_ID where loss_mask is 0
    loss_mask: np.ndarray  # [B, S] 1 where the next token is target or eos
    prefix_len: np.ndarray  # [B]
    valid: np.ndarray  # [B, S]
    task_ids: list[str]

    @property
    def num_target_tokens(self) -> int:
        return int(self.loss_mask.sum())


def encode_example(record: TaskRecord, tok: Tokenizer, cfg: ModelConfig, k: int | None = None):
    """(prompt ids, target ids + eos); the prompt keeps its rightmost tokens."""
    prompt = tok.encode(assemble_prompt(record, k))[-cfg.max_input_len:]
    target = tok.encode(record.target)[: cfg.max_target_len - 1] + [tok.eos_id]
    return prompt, target


def make_batch(records: Sequence[TaskRecord], tok: Tokenizer, cfg: ModelConfig) -> Batch:
    encoded = [encode_example(r, tok, cfg) for r in records]
    width = max(len(p) + len(t) for p, t in encoded) - 1
    b = len(records)
    ids = np.full((b, width), tok.pad_id, dtype=np.int64)
    targets = np.full((b, width), IGNORE_ID, dtype=np.int64)
    mask = np.zeros((b, width), dtype=np.int8)
    valid = np.zeros((b, width), dtype=bool)
    prefix = np.zeros(b, dtype=np.int64)
    for i, (p, t) in enumerate(encoded):
        seq = p + t
        n = len(seq) - 1
        ids[i, :n] = seq[:-1]
        valid[i, :n] = True
        # position j predicts seq[j + 1]; the first target token is predicted from the last prompt slot
        lo = len(p) - 1
        targets[i, lo:n] = seq[lo + 1:]
        mask[i, lo:n] = 1
        prefix[i] = len(p)
    return Batch(ids, targets, mask, prefix, valid, [r.task_name for r in records])


def sample_records(mixture: Mapping[str, Sequence[TaskRecord]], n: int, rng: Rng) -> list[TaskRecord]:
    """Task-uniform, then example-uniform, with replacement."""
    names = sorted(k for k, v in mixture.items() if len(v))
    if not names:
        raise ValueError("training mixture is empty")
    task_pick = rng.integers(0, len(names), n)
    out = []
    for ti in task_pick:
        pool = mixture[names[int(ti)]]
        out.append(pool[int(rng.integers(0, len(pool)))])
    return out


def batch_for_step(mixture, tok: Tokenizer, mcfg: ModelConfig, tcfg: TrainConfig, step: int) -> Batch:
    rng = Rng(tcfg.seed).child("data", step)
    return make_batch(sample_records(mixture, tcfg.batch_size, rng), tok, mcfg)


# -- loss -------------------------------------------------------------------------------


def loss_fn(logits: DiffTensor, batch: Batch, aux: DiffTensor | float = 0.0) -> tuple[DiffTensor, DiffTensor]:
    """(total, lm): masked next-token cross-entropy plus the auxiliary term."""
    if batch.num_target_tokens == 0:
        raise DegenerateBatchError("batch has no target tokens")
    b, s, v = logits.shape
    if batch.targets.shape != (b, s):
        raise nt.DimensionError(f"logits {logits.shape} vs targets {batch.targets.shape}")
    flat = nt.reshape(logits, (b * s, v))
    lm = nt.cross_entropy(flat, batch.targets.reshape(-1), IGNORE_ID)
    return nt.add(lm, aux), lm


# -- optimizer --------------------------------------------------------------------------


def freeze_mask(params: ModelParams, mode: FreezeMode | str) -> set[str]:
    mode = FreezeMode(mode)
    roles = {
        FreezeMode.NONE: (),
        FreezeMode.FREEZE_GATE: (Role.GATE,),
        FreezeMode.FREEZE_EXPERT: (Role.EXPERT,),
        FreezeMode.FREEZE_MOE: (Role.GATE, Role.EXPERT),
    }[mode]
    return {n for n in params if params.roles[n] in roles}


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def step(params: ModelParams, state: AdamState, cfg: TrainConfig, frozen: set[str] | None = None) -> AdamState:
    """One Adam update in place from ``params[name].grad``.

    Frozen names keep their values and their gradients are dropped. A
    missing gradient counts as zero.
    """
    frozen = freeze_mask(params, cfg.freeze_mode) if frozen is None else frozen
    for name in sorted(params):
        g = params[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name in sorted(params):
        p = params[name]
        if name in frozen:
            p.grad = None
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.values = (p.values - update).astype(p.values.dtype)
    return state


# -- checkpoints ------------------------------------------------------------------------


def average_checkpoints(paths: Sequence) -> tuple[ModelConfig, ModelParams]:
    """Elementwise mean (accumulated in 64-bit, stored in the model dtype)."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    cfg0, p0, _ = load_checkpoint(paths[0])
    acc = {n: p0[n].values.astype(np.float64) for n in p0}
    for path in paths[1:]:
        cfg, p, _ = load_checkpoint(path)
        if cfg != cfg0:
            raise ValueError(f"config mismatch: {path} differs from {paths[0]}")
        if set(p) != set(acc):
            raise ValueError(f"parameter names differ: {path}")
        for n in acc:
            acc[n] += p[n].values
    out = ModelParams()
    for n in sorted(acc):
        out.add(n, (acc[n] / len(paths)).astype(p0[n].values.dtype), p0.roles[n])
    return cfg0, out


# -- training loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    usage: list[dict]
    checkpoints: list[Path]
    averaged: ModelParams | None = None


def forward_loss(params, mcfg: ModelConfig, tcfg: TrainConfig, batch: Batch, step_no: int):
    rng = Rng(tcfg.seed).child("dropout", step_no)
    out = transformer_stack(batch.ids, params, mcfg, True, rng, batch.prefix_len, batch.valid)
    total, lm = loss_fn(out.logits, batch, out.aux)
    return total, lm, out


def _metric_record(step_no: int, total, lm, out) -> dict:
    return {
        "step": step_no,
        "loss": float(total.values),
        "lm_loss": float(lm.values),
        "aux_loss": float(out.aux.values),
        "dropped_fraction": out.dropped_fraction,
        "per_layer_usage": {str(i): u.to_dict() for i, u in sorted(out.usage.items())},
    }


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    try:
        with path.open("w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def train(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    mixture: Mapping[str, Sequence[TaskRecord]],
    tok: Tokenizer,
    out_dir=None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Run ``tcfg.steps`` updates; writes logs and checkpoints when ``out_dir`` is set.

    Checkpoints are taken every ``checkpoint_every`` steps and after the last
    step; the last ``average_last_n`` of them are averaged into
    ``averaged.ckpt``.
    """
    if not any(len(v) for v in mixture.values()):
        raise ValueError("training mixture is empty")
    if len(tok) > mcfg.vocab_size:
        raise ValueError(f"tokenizer has {len(tok)} words but vocab_size is {mcfg.vocab_size}")
    params = init.copy(mcfg.np_dtype) if init is not None else init_params(mcfg, tcfg.seed)
    frozen = freeze_mask(params, tcfg.freeze_mode)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics, usage, ckpts = [], [], []
    meta = {"seed": tcfg.seed, "freeze_mode": tcfg.freeze_mode.value}

    def checkpoint(step_no):
        if out is None:
            return
        path = out / "checkpoints" / f"step_{step_no:06d}.ckpt"
        ckpts.append(save_checkpoint(path, mcfg, params, {**meta, "step": step_no}))

    for s in range(1, tcfg.steps + 1):
        batch = batch_for_step(mixture, tok, mcfg, tcfg, s)
        params.zero_grad()
        total, lm, fwd = forward_loss(params, mcfg, tcfg, batch, s)
        total.backward()
        step(params, state, tcfg, frozen)
        if s % tcfg.log_every == 0 or s == tcfg.steps:
            rec = _metric_record(s, total, lm, fwd)
            metrics.append(rec)
            usage.append({"step": s, "per_layer_usage": rec["per_layer_usage"]})
        if tcfg.checkpoint_every and s % tcfg.checkpoint_every == 0 and s != tcfg.steps:
            checkpoint(s)
    params.zero_grad()
    checkpoint(tcfg.steps)

    averaged = None
    if out is not None:
        _write_jsonl(out / "metrics.jsonl", metrics)
        _write_jsonl(out / "usage.jsonl", usage)
        save_checkpoint(out / "final.ckpt", mcfg, params, {**meta, "step": tcfg.steps})
        _, averaged = average_checkpoints(ckpts[-tcfg.average_last_n:])
        save_checkpoint(out / "averaged.ckpt", mcfg, averaged, {**meta, "averaged": len(ckpts[-tcfg.average_last_n:])})
    return TrainResult(params, metrics, usage, ckpts, averaged)


def replay_loss(ckpt_path, tcfg: TrainConfig, mixture, tok: Tokenizer, step_no: int) -> float:
    """Loss logged at ``step_no``, recomputed from the checkpoint taken just before it."""
    mcfg, params, _ = load_checkpoint(ckpt_path)
    batch = batch_for_step(mixture, tok, mcfg, tcfg, step_no)
    total, _, _ = forward_loss(params, mcfg, tcfg, batch, step_no)
    return float(total.values)


# -- decoding ---------------------------------------------------------------------------


def greedy_generate(
    params: ModelParams,
    mcfg: ModelConfig,
    tok: Tokenizer,
    prompts: Sequence[str],
    max_new_tokens: int | None = None,
    batch_size: int = 64,
) -> list[str]:
    """Argmax decoding until eos or ``max_new_tokens`` (default max_target_len)."""
    limit = mcfg.max_target_len if max_new_tokens is None else min(max_new_tokens, mcfg.max_target_len)
    results: list[str] = []
    for start in range(0, len(prompts), batch_size):
        chunk = [tok.encode(p)[-mcfg.max_input_len:] for p in prompts[start:start + batch_size]]
        results.extend(_greedy_chunk(params, mcfg, tok, chunk, limit))
    return results


def _greedy_chunk(params, mcfg, tok, chunk: list[list[int]], limit: int) -> list[str]:
    b = len(chunk)
    plen = np.array([len(c) for c in chunk], dtype=np.int64)
    width = int(plen.max()) + limit
    ids = np.full((b, width), tok.pad_id, dtype=np.int64)
    for i, c in enumerate(chunk):
        ids[i, : len(c)] = c
    cur = plen.copy()
    done = np.zeros(b, dtype=bool)
    gen: list[list[int]] = [[] for _ in range(b)]
    for _ in range(limit):
        w = int(cur.max())
        valid = np.arange(w)[None, :] < cur[:, None]
        out = transformer_stack(ids[:, :w], params, mcfg, False, None, plen, valid)
        nxt = np.argmax(out.logits.values[np.arange(b), cur - 1], axis=-1)
        for i in range(b):
            if done[i]:
                continue
            t = int(nxt[i])
            if t == tok.eos_id:
                done[i] = True
                continue
            gen[i].append(t)
            ids[i, cur[i]] = t
            cur[i] += 1
        if done.all():
            break
    return [tok.decode(g) for g in gen]


def model_generator(params: ModelParams, mcfg: ModelConfig, tok: Tokenizer, batch_size: int = 64):
    return lambda prompts: greedy_generate(params, mcfg, tok, prompts, batch_size=batch_size)


def least_squares_slope(values: Sequence[float]) -> float:
    y = np.asarray(values, dtype=np.float64)
    if len(y) < 2:
        return 0.0
    x = np.arange(len(y), dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])
