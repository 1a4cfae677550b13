"""Gating, top-k dispatch under capacity limits, combine, and router losses.

Three strategies are supported:

* ``token_choice_top1``: each token picks its argmax expert (Switch style).
* ``token_choice_top2``: each token picks its two best experts, gates
  renormalized to sum to one (GShard style).
* ``expert_choice``: each expert picks its ``C`` highest-scoring tokens.

Ties are always broken toward the lower index. Token-choice overflow is
resolved by letting tokens claim expert slots in ascending token order; an
assignment to a full expert is dropped and contributes nothing to the
combined output (the residual path carries the token).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import tensor as nt
from .numerics.tensor import DiffTensor


class Strategy(str, Enum):
    TOKEN_CHOICE_TOP1 = "token_choice_top1"
    TOKEN_CHOICE_TOP2 = "token_choice_top2"
    EXPERT_CHOICE = "expert_choice"

    @property
    def is_token_choice(self) -> bool:
        return self is not Strategy.EXPERT_CHOICE


class AuxLoss(str, Enum):
    NONE = "none"
    BALANCE = "balance"
    ZLOSS = "zloss"
    BOTH = "both"

    @property
    def uses_balance(self) -> bool:
        return self in (AuxLoss.BALANCE, AuxLoss.BOTH)

    @property
    def uses_z(self) -> bool:
        return self in (AuxLoss.ZLOSS, AuxLoss.BOTH)


class RoutingConfigError(ValueError):
    pass


_DEFAULT_K = {Strategy.TOKEN_CHOICE_TOP1: 1, Strategy.TOKEN_CHOICE_TOP2: 2, Strategy.EXPERT_CHOICE: 2}


@dataclass(frozen=True)
class RouterConfig:
    strategy: Strategy = Strategy.TOKEN_CHOICE_TOP2
    num_experts: int = 4
    top_k: int | None = None
    capacity_factor: float = 2.0
    aux_loss: AuxLoss = AuxLoss.BALANCE
    aux_weight_balance: float = 0.01
    aux_weight_z: float = 0.001
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "aux_loss", AuxLoss(self.aux_loss))
        if self.top_k is None:
            object.__setattr__(self, "top_k", min(_DEFAULT_K[self.strategy], self.num_experts))
        if self.num_experts < 1:
            raise RoutingConfigError(f"num_experts must be positive, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise RoutingConfigError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.strategy is Strategy.TOKEN_CHOICE_TOP1 and self.top_k != 1:
            raise RoutingConfigError("token_choice_top1 requires top_k == 1")
        if self.strategy is Strategy.TOKEN_CHOICE_TOP2 and self.top_k != 2:
            raise RoutingConfigError("token_choice_top2 requires top_k == 2")
        if not self.capacity_factor > 0:
            raise RoutingConfigError(f"capacity_factor must be positive, got {self.capacity_factor}")
        if self.aux_weight_balance < 0 or self.aux_weight_z < 0:
            raise RoutingConfigError("aux loss weights must be non-negative")
        if self.noise_std < 0:
            raise RoutingConfigError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "capacity_factor": self.capacity_factor,
            "aux_loss": self.aux_loss.value,
            "aux_weight_balance": self.aux_weight_balance,
            "aux_weight_z": self.aux_weight_z,
            "noise_std": self.noise_std,
        }


@dataclass(frozen=True, eq=False)
class DispatchPlan:
    """Immutable routing decision for ``num_tokens`` tokens.

    Assignment arrays are parallel and sorted by (expert, slot), which is the
    order expert outputs are concatenated in before ``combine``.
    """

    strategy: Strategy
    num_tokens: int
    num_experts: int
    top_k: int
    capacity: int
    token_index: np.ndarray
    expert_index: np.ndarray
    slot_index: np.ndarray
    gate_weight: np.ndarray
    choice_rank: np.ndarray
    dropped: np.ndarray
    gate_probs: np.ndarray
    topk_experts: np.ndarray | None = None
    dropped_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    @property
    def assignments(self) -> list[tuple[int, int, int, float]]:
        return [
            (int(t), int(e), int(s), float(g))
            for t, e, s, g in zip(self.token_index, self.expert_index, self.slot_index, self.gate_weight)
        ]

    @property
    def num_assignments(self) -> int:
        return int(self.token_index.shape[0])

    def expert_slices(self) -> list[slice]:
        """Slice of the assignment arrays belonging to each expert."""
        bounds = np.searchsorted(self.expert_index, np.arange(self.num_experts + 1))
        return [slice(int(bounds[e]), int(bounds[e + 1])) for e in range(self.num_experts)]

    def load(self) -> np.ndarray:
        return np.bincount(self.expert_index, minlength=self.num_experts)

    def to_bytes(self) -> bytes:
        parts = [
            self.token_index,
            self.expert_index,
            self.slot_index,
            self.gate_weight,
            self.choice_rank,
            self.dropped,
            self.dropped_pairs,
        ]
        head = f"{self.strategy.value}|{self.num_tokens}|{self.num_experts}|{self.top_k}|{self.capacity}".encode()
        return head + b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, DiffTensor) else np.asarray(x)


def gate_logits(router_weights: DiffTensor, tokens: DiffTensor) -> DiffTensor:
    if tokens.ndim != 2 or router_weights.ndim != 2 or tokens.shape[1] != router_weights.shape[0]:
        raise nt.DimensionError(
            f"gate: tokens {tokens.shape} incompatible with router weights {router_weights.shape}"
        )
    return nt.matmul(tokens, router_weights)


def gate_probs(router_weights: DiffTensor, tokens: DiffTensor) -> DiffTensor:
    """softmax(tokens @ router_weights) per token, shape [T, E]."""
    return nt.softmax(gate_logits(router_weights, tokens))


def capacity(num_tokens: int, cfg: RouterConfig) -> int:
    """ceil(capacity_factor * K * T / E), at least 1."""
    if num_tokens < 1:
        raise RoutingConfigError(f"capacity needs at least one token, got {num_tokens}")
    raw = cfg.capacity_factor * cfg.top_k * num_tokens / cfg.num_experts
    # absorb float noise such as 1.1 * 10 == 11.000000000000002
    return max(1, math.ceil(raw - 1e-9))


def _ranked_experts(probs: np.ndarray) -> np.ndarray:
    # stable sort of negated scores keeps the lower index first on ties
    return np.argsort(-probs, axis=1, kind="stable")


def route_token_choice(probs, k: int, capacity: int) -> DispatchPlan:
    probs = np.asarray(_as_array(probs), dtype=np.float64)
    if capacity < 1:
        raise RoutingConfigError(f"capacity must be >= 1, got {capacity}")
    t, e = probs.shape
    if not 1 <= k <= e:
        raise RoutingConfigError(f"top_k must be in [1, {e}], got {k}")
    topk = _ranked_experts(probs)[:, :k]

    # claims in (token, rank) order; position = how many earlier claims hit the same expert
    flat_expert = topk.reshape(-1)
    flat_token = np.repeat(np.arange(t), k)
    flat_rank = np.tile(np.arange(k), t)
    onehot = flat_expert[:, None] == np.arange(e)[None, :]
    position = np.cumsum(onehot, axis=0)[np.arange(t * k), flat_expert] - 1
    keep = position < capacity

    chosen = probs[np.arange(t)[:, None], topk]
    if k == 1:
        weights = chosen
    else:
        weights = chosen / chosen.sum(axis=1, keepdims=True)
    flat_weight = weights.reshape(-1)

    kept = np.flatnonzero(keep)
    order = kept[np.lexsort((position[kept], flat_expert[kept]))]
    covered = np.zeros(t, dtype=bool)
    covered[flat_token[kept]] = True
    lost = np.flatnonzero(~keep)
    return DispatchPlan(
        strategy=Strategy.TOKEN_CHOICE_TOP1 if k == 1 else Strategy.TOKEN_CHOICE_TOP2,
        num_tokens=t,
        num_experts=e,
        top_k=k,
        capacity=capacity,
        token_index=flat_token[order].astype(np.int64),
        expert_index=flat_expert[order].astype(np.int64),
        slot_index=position[order].astype(np.int64),
        gate_weight=flat_weight[order].astype(np.float64),
        choice_rank=flat_rank[order].astype(np.int64),
        dropped=np.flatnonzero(~covered).astype(np.int64),
        gate_probs=probs,
        topk_experts=topk.astype(np.int64),
        dropped_pairs=np.stack([flat_token[lost], flat_expert[lost]], axis=1).astype(np.int64),
    )


def route_expert_choice(scores, capacity: int, probs=None) -> DispatchPlan:
    """Each expert takes its top-``capacity`` tokens by score column.

    Gate weights come from ``probs`` (the softmax gate) when given, else from
    ``scores`` themselves.
    """
    scores = np.asarray(_as_array(scores), dtype=np.float64)
    probs = scores if probs is None else np.asarray(_as_array(probs), dtype=np.float64)
    if capacity < 1:
        raise RoutingConfigError(f"capacity must be >= 1, got {capacity}")
    t, e = scores.shape
    n = min(capacity, t)
    picks = np.argsort(-scores, axis=0, kind="stable")[:n, :]  # [n, E]
    token_index = picks.T.reshape(-1)
    expert_index = np.repeat(np.arange(e), n)
    slot_index = np.tile(np.arange(n), e)
    covered = np.zeros(t, dtype=bool)
    covered[token_index] = True
    return DispatchPlan(
        strategy=Strategy.EXPERT_CHOICE,
        num_tokens=t,
        num_experts=e,
        top_k=n,
        capacity=capacity,
        token_index=token_index.astype(np.int64),
        expert_index=expert_index.astype(np.int64),
        slot_index=slot_index.astype(np.int64),
        gate_weight=probs[token_index, expert_index].astype(np.float64),
        choice_rank=slot_index.astype(np.int64),
        dropped=np.flatnonzero(~covered).astype(np.int64),
        gate_probs=probs,
    )


def route(probs, cfg: RouterConfig) -> DispatchPlan:
    """Dispatch ``probs`` [T, E] under ``cfg``."""
    probs = _as_array(probs)
    c = capacity(probs.shape[0], cfg)
    if cfg.strategy is Strategy.EXPERT_CHOICE:
        return route_expert_choice(probs, c)
    return route_token_choice(probs, cfg.top_k, c)


def gate_weight_tensor(probs: DiffTensor, plan: DispatchPlan) -> DiffTensor:
    """Differentiable gate weight per assignment, in plan order."""
    if plan.strategy is Strategy.EXPERT_CHOICE or plan.top_k == 1:
        return nt.take_pairs(probs, plan.token_index, plan.expert_index)
    t, k = plan.topk_experts.shape
    chosen = nt.take_pairs(probs, np.repeat(np.arange(t), k), plan.topk_experts.reshape(-1))
    chosen = nt.reshape(chosen, (t, k))
    normed = nt.div(chosen, nt.reduce_sum(chosen, axis=1, keepdims=True))
    flat = nt.reshape(normed, (t * k, 1))
    picked = nt.embedding_lookup(flat, plan.token_index * k + plan.choice_rank)
    return nt.reshape(picked, (plan.num_assignments,))


def combine(plan: DispatchPlan, expert_outputs, num_tokens: int, gates: DiffTensor | None = None) -> DiffTensor:
    """out[t] = sum of gate * expert output over the assignments of token t.

    ``expert_outputs`` is either one [n_assign, D] tensor in plan order or a
    per-expert list of [load_e, D] tensors.
    """
    if isinstance(expert_outputs, (list, tuple)):
        if len(expert_outputs) != plan.num_experts:
            raise ValueError(f"combine: {len(expert_outputs)} expert outputs for {plan.num_experts} experts")
        expert_outputs = nt.concat(list(expert_outputs), axis=0)
    if expert_outputs.shape[0] != plan.num_assignments:
        raise ValueError(
            f"combine: {expert_outputs.shape[0]} output rows for {plan.num_assignments} assignments"
        )
    if gates is None:
        gates = DiffTensor(plan.gate_weight.astype(expert_outputs.dtype))
    return nt.weighted_scatter_add(expert_outputs, gates, plan.token_index, num_tokens)


def top1_fraction(probs: np.ndarray) -> np.ndarray:
    """Fraction of tokens whose argmax expert is e."""
    t, e = probs.shape
    top1 = _ranked_experts(probs)[:, 0]
    return np.bincount(top1, minlength=e) / t


def balance_loss(gate_probs: DiffTensor, plan: DispatchPlan | None = None) -> DiffTensor:
    """E * sum_e f_e * P_e; gradient flows through the mean probabilities only."""
    probs = gate_probs.values
    t, e = probs.shape
    if plan is not None and plan.topk_experts is not None:
        f = np.bincount(plan.topk_experts[:, 0], minlength=e) / t
    else:
        f = top1_fraction(probs)
    mean_prob = nt.reduce_mean(gate_probs, axis=0)
    return nt.mul(nt.reduce_sum(nt.mul(mean_prob, f.astype(probs.dtype))), float(e))


def router_z_loss(logits: DiffTensor) -> DiffTensor:
    """Mean over tokens of (log sum_e exp logits)^2."""
    return nt.reduce_mean(nt.square(nt.logsumexp(logits)))


@dataclass(frozen=True)
class UsageStats:
    active_fraction: float
    normalized_entropy: float
    per_expert_load: tuple[int, ...]
    dropped_fraction: float

    def to_dict(self) -> dict:
        return {
            "active_fraction": self.active_fraction,
            "normalized_entropy": self.normalized_entropy,
            "per_expert_load": list(self.per_expert_load),
            "dropped_fraction": self.dropped_fraction,
        }


def load_entropy(load: np.ndarray) -> float:
    """Entropy of the load distribution divided by ln E (0 for E == 1)."""
    load = np.asarray(load, dtype=np.float64)
    total = load.sum()
    if total <= 0 or load.shape[0] < 2:
        return 0.0
    p = load[load > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(load.shape[0]))


def expert_usage(plan: DispatchPlan, num_experts: int | None = None) -> UsageStats:
    e = plan.num_experts if num_experts is None else num_experts
    load = np.bincount(plan.expert_index, minlength=e)
    return UsageStats(
        active_fraction=float((load > 0).sum() / e),
        normalized_entropy=load_entropy(load),
        per_expert_load=tuple(int(v) for v in load),
        dropped_fraction=float(plan.dropped.shape[0] / plan.num_tokens) if plan.num_tokens else 0.0,
    )


def trace_records(plan: DispatchPlan) -> list[dict]:
    """One record per token: chosen experts, gates, slots, dropped flag."""
    per_token: list[list[tuple[int, int, int, float]]] = [[] for _ in range(plan.num_tokens)]
    for t, e, s, g, r in zip(plan.token_index, plan.expert_index, plan.slot_index, plan.gate_weight, plan.choice_rank):
        per_token[int(t)].append((int(r), int(e), int(s), float(g)))
    dropped = set(int(t) for t in plan.dropped)
    records = []
    for t, entries in enumerate(per_token):
        key = (lambda x: x[0]) if plan.strategy.is_token_choice else (lambda x: x[1])
        entries.sort(key=key)
        records.append(
            {
                "token_index": t,
                "experts": [x[1] for x in entries],
                "gates": [round(x[3], 6) for x in entries],
                "slots": [x[2] for x in entries],
                "dropped": t in dropped,
            }
        )
    return records
