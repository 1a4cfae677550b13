import dataclasses

import numpy as np
import pytest

from moelab import numerics as nt
from moelab.model import (
    CheckpointError,
    ConfigError,
    LengthError,
    ModelConfig,
    MoEPattern,
    Role,
    attention_mask,
    checkpoint_bytes,
    count_params,
    dense_counterpart,
    init_params,
    load_checkpoint,
    moe_layer,
    relative_buckets,
    save_checkpoint,
    transformer_stack,
)
from moelab.numerics import DiffTensor, Rng, finite_difference_check
from moelab.routing import RouterConfig


def tiny(**kw):
    base = dict(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2, max_input_len=16, max_target_len=8)
    base.update(kw)
    return ModelConfig(**base)


def ids_for(cfg, b=2, s=6, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, (b, s))


# -- config and params ------------------------------------------------------------------


def test_config_round_trip_and_unknown_keys():
    cfg = tiny(router=RouterConfig(strategy="expert_choice", num_experts=3))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ConfigError):
        tiny(d_model=15, num_heads=2)


def test_moe_placement_every_other():
    cfg = tiny(num_layers=4)
    assert cfg.moe_blocks() == [1, 3]
    assert tiny(num_layers=3, moe_pattern="all").moe_blocks() == [0, 1, 2]
    assert tiny(moe_pattern="none").moe_blocks() == []


def test_param_roles():
    cfg = tiny()
    p = init_params(cfg, 0)
    assert p.names(Role.GATE) == ["blocks.1.moe.router"]
    assert all(".moe.experts." in n for n in p.names(Role.EXPERT))
    assert len(p.names(Role.EXPERT)) == 4 * cfg.router.num_experts
    assert "blocks.0.ffn.w_in" in p and p.roles["blocks.0.ffn.w_in"] is Role.DENSE


def test_init_is_seeded():
    a, b, c = init_params(tiny(), 1), init_params(tiny(), 1), init_params(tiny(), 2)
    assert all(a[n].values.tobytes() == b[n].values.tobytes() for n in a)
    assert a["embed"].values.tobytes() != c["embed"].values.tobytes()


def test_count_params_active_subset():
    cfg = tiny()
    counts = count_params(init_params(cfg, 0), cfg)
    expert = 16 * 32 + 32 + 32 * 16 + 16
    assert counts["total"] - counts["active_per_token"] == (cfg.router.num_experts - cfg.router.top_k) * expert


# -- attention pieces -------------------------------------------------------------------


def test_relative_buckets_exact_for_small_offsets():
    b = relative_buckets(6, 32, 128)
    assert b[0, 0] == 0 and b[3, 2] == 1 and b[2, 3] == 16 + 1
    assert len({b[i, j] for i in range(6) for j in range(6)}) == 11


def test_prefix_lm_mask():
    m = attention_mask(np.array([2]), np.array([[True, True, True, True, False]]))[0]
    # prefix keys visible everywhere, later keys causal, padding never
    assert m[0, 1] and m[1, 0]
    assert not m[2, 3] and m[3, 2]
    assert not m[:, 4].any()


# -- forward ----------------------------------------------------------------------------


def test_stack_shapes_and_dtype():
    cfg = tiny()
    out = transformer_stack(ids_for(cfg), init_params(cfg, 0), cfg)
    assert out.logits.shape == (2, 6, 32) and out.logits.dtype == np.float32
    assert set(out.usage) == {1} and out.aux.shape == ()


def test_stack_rejects_overlong_sequences():
    cfg = tiny()
    with pytest.raises(LengthError):
        transformer_stack(np.zeros((1, cfg.max_len + 1), dtype=np.int64), init_params(cfg, 0), cfg)


def test_future_tokens_do_not_leak_past_prefix():
    cfg = tiny(moe_pattern="none")
    p = init_params(cfg, 0)
    ids = ids_for(cfg, 1, 8)
    changed = ids.copy()
    changed[0, 6] = (changed[0, 6] + 1) % cfg.vocab_size
    a = transformer_stack(ids, p, cfg, prefix_len=[3]).logits.values
    b = transformer_stack(changed, p, cfg, prefix_len=[3]).logits.values
    np.testing.assert_array_equal(a[0, :6], b[0, :6])
    assert not np.array_equal(a[0, 6:], b[0, 6:])


def test_prefix_tokens_see_each_other():
    cfg = tiny(moe_pattern="none")
    p = init_params(cfg, 0)
    ids = ids_for(cfg, 1, 6)
    changed = ids.copy()
    changed[0, 2] = (changed[0, 2] + 1) % cfg.vocab_size
    a = transformer_stack(ids, p, cfg, prefix_len=[4]).logits.values
    b = transformer_stack(changed, p, cfg, prefix_len=[4]).logits.values
    assert not np.array_equal(a[0, 0], b[0, 0])


def test_moe_layer_residual_for_dropped_tokens():
    cfg = tiny(router=RouterConfig(strategy="token_choice_top1", num_experts=4, capacity_factor=0.25))
    p = init_params(cfg, 0).sub("blocks.1.")
    x = DiffTensor(np.random.default_rng(0).normal(size=(16, 16)).astype(np.float32))
    out = moe_layer(x, p, cfg)
    for t in out.plan.dropped:
        np.testing.assert_array_equal(out.y.values[t], x.values[t])
    assert out.usage.dropped_fraction == len(out.plan.dropped) / 16


def test_expert_choice_and_top1_stacks_run():
    for strategy in ("token_choice_top1", "expert_choice"):
        cfg = tiny(router=RouterConfig(strategy=strategy, num_experts=3))
        out = transformer_stack(ids_for(cfg), init_params(cfg, 0), cfg, True, Rng(0))
        assert np.all(np.isfinite(out.logits.values))


def test_training_needs_rng():
    cfg = tiny()
    with pytest.raises(ValueError):
        transformer_stack(ids_for(cfg), init_params(cfg, 0), cfg, training=True)


# -- dense equivalence ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_single_expert_stack_equals_dense(seed):
    cfg = tiny(router=RouterConfig(strategy="token_choice_top1", num_experts=1, capacity_factor=64.0))
    params = init_params(cfg, seed)
    dense_cfg, dense = dense_counterpart(params, cfg)
    ids = ids_for(cfg, 3, 7, seed)
    a = transformer_stack(ids, params, cfg, prefix_len=[2, 3, 4]).logits.values
    b = transformer_stack(ids, dense, dense_cfg, prefix_len=[2, 3, 4]).logits.values
    assert a.tobytes() == b.tobytes()


def test_dense_counterpart_needs_single_expert():
    with pytest.raises(ConfigError):
        dense_counterpart(init_params(tiny(), 0), tiny())


# -- gradients --------------------------------------------------------------------------


def _stack_loss(params, cfg, ids, targets):
    out = transformer_stack(ids, params, cfg, True, Rng(5), prefix_len=[2, 3])
    b, s, v = out.logits.shape
    lm = nt.cross_entropy(nt.reshape(out.logits, (b * s, v)), targets.reshape(-1), -100)
    return nt.add(lm, out.aux)


def test_full_stack_gradients_float64():
    cfg = tiny(dtype="float64", router=RouterConfig(num_experts=4, aux_loss="both"))
    params = init_params(cfg, 3)
    ids = ids_for(cfg, 2, 5, 1)
    targets = np.where(np.arange(5) >= 2, ids_for(cfg, 2, 5, 2), -100)
    for t in params.tensors.values():
        t.requires_grad = True
    names = sorted(params)
    rep = finite_difference_check(
        lambda: _stack_loss(params, cfg, ids, targets), [params[n] for n in names], names=names,
        max_coords=6, rng=np.random.default_rng(0),
    )
    assert rep.passed, rep.message


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny()
    p = init_params(cfg, 4)
    path = save_checkpoint(tmp_path / "a.ckpt", cfg, p, {"step": 3})
    cfg2, p2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"step": 3}
    assert sorted(p2) == sorted(p)
    for n in p:
        assert p2[n].values.tobytes() == p[n].values.tobytes() and p2.roles[n] is p.roles[n]
    assert checkpoint_bytes(cfg, p, {"step": 3}) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_params_copy_changes_dtype_not_values():
    p = init_params(tiny(), 0)
    q = p.copy(np.float64)
    assert q["embed"].dtype == np.float64
    np.testing.assert_array_equal(q["embed"].values, p["embed"].values.astype(np.float64))
    q["embed"].values[0, 0] += 1
    assert p["embed"].values[0, 0] != q["embed"].values[0, 0]


def test_moe_pattern_none_has_no_gate_or_expert_params():
    p = init_params(dataclasses.replace(tiny(), moe_pattern=MoEPattern.NONE), 0)
    assert p.names(Role.GATE) == [] and p.names(Role.EXPERT) == []
