"""Decoder-only prefix-LM transformer with sparse MoE feed-forward blocks.

Block ``i`` is pre-norm: ``x + attn(ln(x))`` followed by a feed-forward
sublayer ``x + ffn(ln(x))``. Under the default ``every_other`` pattern the
odd-indexed blocks (0-based) swap the dense FFN for an MoE layer. Attention
is bidirectional over the prefix (instruction + input) and causal over the
target segment, with a bucketed relative-position bias shared by all layers.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import routing
from .numerics import tensor as nt
from .numerics.rng import Rng
from .numerics.serialize import dump_array, load_array
from .numerics.tensor import DiffTensor
from .routing import RouterConfig, UsageStats

MASK_VALUE = -1e9


class Role(str, Enum):
    GATE = "gate"
    EXPERT = "expert"
    DENSE = "dense"


class MoEPattern(str, Enum):
    EVERY_OTHER = "every_other"
    ALL = "all"
    NONE = "none"


class LengthError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 32
    d_ff: int = 64
    num_layers: int = 2
    num_heads: int = 2
    router: RouterConfig = field(default_factory=RouterConfig)
    moe_pattern: MoEPattern = MoEPattern.EVERY_OTHER
    dropout: float = 0.05
    expert_dropout: float = 0.2
    max_input_len: int = 128
    max_target_len: int = 32
    rel_buckets: int = 32
    rel_max_distance: int = 128
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "moe_pattern", MoEPattern(self.moe_pattern))
        if isinstance(self.router, Mapping):
            object.__setattr__(self, "router", RouterConfig(**self.router))
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if min(self.vocab_size, self.d_model, self.d_ff, self.num_layers) < 1:
            raise ConfigError("sizes must be positive")
        if not (0 <= self.dropout < 1 and 0 <= self.expert_dropout < 1):
            raise ConfigError("dropout rates must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.rel_buckets < 4 or self.rel_buckets % 2:
            raise ConfigError("rel_buckets must be an even number >= 4")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def max_len(self) -> int:
        return self.max_input_len + self.max_target_len

    def is_moe_block(self, i: int) -> bool:
        if self.moe_pattern is MoEPattern.NONE:
            return False
        if self.moe_pattern is MoEPattern.ALL:
            return True
        return i % 2 == 1

    def moe_blocks(self) -> list[int]:
        return [i for i in range(self.num_layers) if self.is_moe_block(i)]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, RouterConfig):
                v = v.to_dict()
            elif isinstance(v, Enum):
                v = v.value
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "router" in d and isinstance(d["router"], Mapping):
            d["router"] = RouterConfig(**d["router"])
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class ModelParams:
    """Named parameter tensors, each tagged Gate, Expert, or Dense."""

    def __init__(self, tensors: dict[str, DiffTensor] | None = None, roles: dict[str, Role] | None = None):
        self.tensors: dict[str, DiffTensor] = dict(tensors or {})
        self.roles: dict[str, Role] = dict(roles or {})

    def add(self, name: str, values: np.ndarray, role: Role) -> DiffTensor:
        t = DiffTensor(values, requires_grad=True, name=name)
        self.tensors[name] = t
        self.roles[name] = role
        return t

    def __getitem__(self, name: str) -> DiffTensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, role: Role | None = None) -> list[str]:
        return [n for n in self.tensors if role is None or self.roles[n] is role]

    def sub(self, prefix: str) -> dict[str, DiffTensor]:
        return {n[len(prefix):]: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def numel(self, role: Role | None = None) -> int:
        return int(sum(self.tensors[n].size for n in self.names(role)))

    def copy(self, dtype=None) -> ModelParams:
        out = ModelParams()
        for n, t in self.tensors.items():
            vals = t.values.astype(dtype) if dtype is not None else t.values.copy()
            out.add(n, vals, self.roles[n])
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.values for n, t in self.tensors.items()}


# -- initialization -------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int | Rng = 0) -> ModelParams:
    """Fresh parameters. Each tensor draws from its own named sub-stream."""
    rng = seed if isinstance(seed, Rng) else Rng(seed).child("init")
    dt = cfg.np_dtype
    d, f, v, h = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.num_heads
    out_scale = 1.0 / math.sqrt(2 * cfg.num_layers)
    p = ModelParams()

    def normal(name, shape, std):
        return rng.child(name).normal(shape, std).astype(dt)

    def zeros(shape):
        return np.zeros(shape, dtype=dt)

    def ones(shape):
        return np.ones(shape, dtype=dt)

    p.add("embed", normal("embed", (v, d), 1.0), Role.DENSE)
    p.add("rel_bias", zeros((cfg.rel_buckets, h)), Role.DENSE)
    for i in range(cfg.num_layers):
        b = f"blocks.{i}."
        p.add(b + "ln1.gain", ones(d), Role.DENSE)
        p.add(b + "ln1.bias", zeros(d), Role.DENSE)
        for m in ("q", "k", "v"):
            p.add(b + f"attn.w{m}", normal(b + f"attn.w{m}", (d, d), d**-0.5), Role.DENSE)
            p.add(b + f"attn.b{m}", zeros(d), Role.DENSE)
        p.add(b + "attn.wo", normal(b + "attn.wo", (d, d), d**-0.5 * out_scale), Role.DENSE)
        p.add(b + "attn.bo", zeros(d), Role.DENSE)
        p.add(b + "ln2.gain", ones(d), Role.DENSE)
        p.add(b + "ln2.bias", zeros(d), Role.DENSE)
        if cfg.is_moe_block(i):
            e_count = cfg.router.num_experts
            p.add(b + "moe.router", normal(b + "moe.router", (d, e_count), d**-0.5), Role.GATE)
            for e in range(e_count):
                _add_ffn(p, normal, zeros, b + f"moe.experts.{e}.", d, f, out_scale, Role.EXPERT)
        else:
            _add_ffn(p, normal, zeros, b + "ffn.", d, f, out_scale, Role.DENSE)
    p.add("final_ln.gain", ones(d), Role.DENSE)
    p.add("final_ln.bias", zeros(d), Role.DENSE)
    p.add("unembed", normal("unembed", (d, v), d**-0.5), Role.DENSE)
    return p


def _add_ffn(p, normal, zeros, prefix, d, f, out_scale, role):
    p.add(prefix + "w_in", normal(prefix + "w_in", (d, f), d**-0.5), role)
    p.add(prefix + "b_in", zeros(f), role)
    p.add(prefix + "w_out", normal(prefix + "w_out", (f, d), f**-0.5 * out_scale), role)
    p.add(prefix + "b_out", zeros(d), role)


# -- layers -----------------------------------------------------------------------------


def ffn(x: DiffTensor, p: Mapping[str, DiffTensor], rate: float, training: bool, rng: Rng | None) -> DiffTensor:
    hidden = nt.gelu(nt.affine(x, p["w_in"], p["b_in"]))
    hidden = nt.dropout(hidden, rate, training, rng)
    return nt.affine(hidden, p["w_out"], p["b_out"])


def expert_ffn(
    x: DiffTensor, p: Mapping[str, DiffTensor], expert_dropout: float, training: bool, rng: Rng | None
) -> DiffTensor:
    """affine(D->F) -> gelu -> dropout(expert_dropout) -> affine(F->D) on [n, D] rows."""
    return ffn(x, p, expert_dropout, training, rng)


@dataclass
class MoEOutput:
    y: DiffTensor
    aux: DiffTensor
    usage: UsageStats
    plan: routing.DispatchPlan
    balance: float = 0.0
    z: float = 0.0


def moe_layer(
    x: DiffTensor,
    p: Mapping[str, DiffTensor],
    cfg: ModelConfig,
    training: bool = False,
    rng: Rng | None = None,
) -> MoEOutput:
    """Residual MoE sublayer on [T, D] tokens: ``x + combine(experts(ln(x)))``.

    ``p`` holds ``ln2.gain``, ``ln2.bias``, ``moe.router`` and
    ``moe.experts.{e}.*`` for one block.
    """
    rc = cfg.router
    t = x.shape[0]
    h = nt.layer_norm(x, p["ln2.gain"], p["ln2.bias"], cfg.ln_eps)
    logits = routing.gate_logits(p["moe.router"], h)
    if training and rc.noise_std > 0:
        noise = rng.child("router_noise").normal(logits.shape, rc.noise_std).astype(logits.dtype)
        logits = nt.add(logits, noise)
    probs = nt.softmax(logits)
    plan = routing.route(probs, rc)
    gates = routing.gate_weight_tensor(probs, plan)

    outputs = []
    for e, sl in enumerate(plan.expert_slices()):
        rows = nt.embedding_lookup(h, plan.token_index[sl])
        sub_rng = rng.child("expert", e) if rng is not None else None
        ep = {k: p[f"moe.experts.{e}.{k}"] for k in ("w_in", "b_in", "w_out", "b_out")}
        outputs.append(expert_ffn(rows, ep, cfg.expert_dropout, training, sub_rng))
    mixed = routing.combine(plan, outputs, t, gates)
    y = nt.add(x, mixed)

    aux = DiffTensor(np.zeros((), dtype=x.dtype))
    bal = z = 0.0
    if rc.aux_loss.uses_balance:
        lb = routing.balance_loss(probs, plan)
        bal = float(lb.values)
        aux = nt.add(aux, nt.mul(lb, rc.aux_weight_balance))
    if rc.aux_loss.uses_z:
        lz = routing.router_z_loss(logits)
        z = float(lz.values)
        aux = nt.add(aux, nt.mul(lz, rc.aux_weight_z))
    return MoEOutput(y, aux, routing.expert_usage(plan), plan, bal, z)


def dense_ffn_layer(
    x: DiffTensor, p: Mapping[str, DiffTensor], cfg: ModelConfig, training: bool = False, rng: Rng | None = None
) -> DiffTensor:
    h = nt.layer_norm(x, p["ln2.gain"], p["ln2.bias"], cfg.ln_eps)
    ep = {k: p[f"ffn.{k}"] for k in ("w_in", "b_in", "w_out", "b_out")}
    return nt.add(x, ffn(h, ep, cfg.dropout, training, rng))


def relative_buckets(seq_len: int, num_buckets: int, max_distance: int) -> np.ndarray:
    """Bidirectional log-spaced buckets of (key - query); exact for small offsets."""
    pos = np.arange(seq_len)
    rel = pos[None, :] - pos[:, None]
    half = num_buckets // 2
    out = np.where(rel > 0, half, 0)
    n = np.abs(rel)
    max_exact = half // 2
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, half - 1)
    return out + np.where(n < max_exact, n, large)


def attention_mask(prefix_len: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """[B, S, S] boolean: key j visible from query i.

    Keys inside the prefix are visible to every query; later keys only to
    queries at or after them. Padding keys are never visible.
    """
    b, s = valid.shape
    pos = np.arange(s)
    causal = pos[None, :] <= pos[:, None]
    in_prefix = pos[None, None, :] < np.asarray(prefix_len)[:, None, None]
    return (causal[None] | in_prefix) & valid[:, None, :]


def self_attention(
    x: DiffTensor,
    p: Mapping[str, DiffTensor],
    bias: DiffTensor,
    mask_add: np.ndarray,
    cfg: ModelConfig,
) -> DiffTensor:
    b, s, d = x.shape
    hn = cfg.num_heads
    dh = d // hn
    h = nt.layer_norm(x, p["ln1.gain"], p["ln1.bias"], cfg.ln_eps)

    def heads(name):
        proj = nt.affine(h, p[f"attn.w{name}"], p[f"attn.b{name}"])
        return nt.reshape(proj, (b, s, hn, dh))

    q = nt.transpose(heads("q"), (0, 2, 1, 3))
    k = nt.transpose(heads("k"), (0, 2, 3, 1))
    v = nt.transpose(heads("v"), (0, 2, 1, 3))
    scores = nt.mul(nt.matmul(q, k), 1.0 / math.sqrt(dh))
    scores = nt.add(nt.add(scores, bias), DiffTensor(mask_add))
    ctx = nt.matmul(nt.softmax(scores), v)
    ctx = nt.reshape(nt.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return nt.affine(ctx, p["attn.wo"], p["attn.bo"])


@dataclass
class StackOutput:
    logits: DiffTensor
    aux: DiffTensor
    usage: dict[int, UsageStats]
    plans: dict[int, routing.DispatchPlan]
    balance: dict[int, float] = field(default_factory=dict)
    z: dict[int, float] = field(default_factory=dict)

    @property
    def dropped_fraction(self) -> float:
        if not self.usage:
            return 0.0
        return float(np.mean([u.dropped_fraction for u in self.usage.values()]))


def transformer_stack(
    ids,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: Rng | None = None,
    prefix_len=None,
    valid=None,
) -> StackOutput:
    """Logits [B, S, V] for token ids [B, S].

    ``prefix_len`` [B] marks how many leading positions attend bidirectionally
    (default 0: fully causal). ``valid`` [B, S] marks non-padding positions.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise nt.DimensionError(f"ids must be [B, S], got {ids.shape}")
    b, s = ids.shape
    if s > cfg.max_len:
        raise LengthError(f"sequence length {s} exceeds max_input_len + max_target_len = {cfg.max_len}")
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    dt = cfg.np_dtype
    valid = np.ones((b, s), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    prefix_len = np.zeros(b, dtype=np.int64) if prefix_len is None else np.asarray(prefix_len, dtype=np.int64)
    mask_add = np.where(attention_mask(prefix_len, valid), 0.0, MASK_VALUE).astype(dt)[:, None, :, :]

    buckets = relative_buckets(s, cfg.rel_buckets, cfg.rel_max_distance)
    bias = nt.transpose(nt.embedding_lookup(params["rel_bias"], buckets), (2, 0, 1))

    x = nt.embedding_lookup(params["embed"], ids)
    aux = DiffTensor(np.zeros((), dtype=dt))
    usage: dict[int, UsageStats] = {}
    plans: dict[int, routing.DispatchPlan] = {}
    bal: dict[int, float] = {}
    zl: dict[int, float] = {}
    for i in range(cfg.num_layers):
        p = params.sub(f"blocks.{i}.")
        lrng = rng.child("block", i) if rng is not None else None
        a = self_attention(x, p, bias, mask_add, cfg)
        a = nt.dropout(a, cfg.dropout, training, lrng.child("attn") if lrng else None)
        x = nt.add(x, a)
        flat = nt.reshape(x, (b * s, cfg.d_model))
        if cfg.is_moe_block(i):
            out = moe_layer(flat, p, cfg, training, lrng.child("moe") if lrng else None)
            flat = out.y
            aux = nt.add(aux, out.aux)
            usage[i] = out.usage
            plans[i] = out.plan
            bal[i] = out.balance
            zl[i] = out.z
        else:
            flat = dense_ffn_layer(flat, p, cfg, training, lrng.child("ffn") if lrng else None)
        x = nt.reshape(flat, (b, s, cfg.d_model))
    x = nt.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], cfg.ln_eps)
    logits = nt.affine(x, params["unembed"])
    return StackOutput(logits, aux, usage, plans, bal, zl)


# -- accounting -------------------------------------------------------------------------


def count_params(params: ModelParams, cfg: ModelConfig) -> dict[str, int]:
    """Total parameters and those touched per token (router + K experts per MoE layer)."""
    total = params.numel()
    inactive = 0
    k = cfg.router.top_k
    for i in cfg.moe_blocks():
        sizes = []
        for e in range(cfg.router.num_experts):
            prefix = f"blocks.{i}.moe.experts.{e}."
            sizes.append(sum(t.size for n, t in params.items() if n.startswith(prefix)))
        # experts are the same size; the E - K unused ones are inactive
        inactive += (cfg.router.num_experts - k) * sizes[0]
    return {"total": int(total), "active_per_token": int(total - inactive)}


def dense_counterpart(params: ModelParams, cfg: ModelConfig) -> tuple[ModelConfig, ModelParams]:
    """Dense model sharing parameters with a single-expert MoE model."""
    if cfg.router.num_experts != 1:
        raise ConfigError("dense counterpart needs num_experts == 1")
    dense_cfg = replace(cfg, moe_pattern=MoEPattern.NONE)
    out = ModelParams()
    for n, t in params.items():
        if ".moe.router" in n:
            continue
        if ".moe.experts.0." in n:
            n = n.replace(".moe.experts.0.", ".ffn.")
            role = Role.DENSE
        else:
            role = params.roles[n]
        out.tensors[n] = t
        out.roles[n] = role
    return dense_cfg, out


# -- checkpoints --------------------------------------------------------------------------

CKPT_MAGIC = b"MOECKPT\x00"
CKPT_VERSION = 1
_ROLE_TAGS = {Role.GATE: 1, Role.EXPERT: 2, Role.DENSE: 3}
_TAG_ROLES = {v: k for k, v in _ROLE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(cfg: ModelConfig, params: ModelParams, meta: Mapping | None = None) -> bytes:
    """Header (canonical config JSON + metadata), then role/name/tensor per parameter."""
    header = json.dumps(
        {"config": cfg.to_dict(), "meta": dict(meta or {})}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<BH", _ROLE_TAGS[params.roles[name]], len(raw)))
        buf.write(raw)
        dump_array(params[name].values, buf)
    return buf.getvalue()


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(cfg, params, meta))
    return path


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    buf = io.BytesIO(data)
    if buf.read(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen).decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    (count,) = struct.unpack("<I", buf.read(4))
    params = ModelParams()
    for _ in range(count):
        tag, nlen = struct.unpack("<BH", buf.read(3))
        name = buf.read(nlen).decode("utf-8")
        params.add(name, load_array(buf), _TAG_ROLES[tag])
    return cfg, params, header.get("meta", {})
