import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab.evalkit import SyntheticSpec, TaskRecord, Tokenizer, build_synthetic
from moelab.model import ModelConfig, ModelParams, Role, init_params, load_checkpoint, save_checkpoint
from moelab.numerics import DiffTensor
from moelab.routing import RouterConfig
from moelab.training import (
    IGNORE_ID,
    AdamState,
    Batch,
    DegenerateBatchError,
    FreezeMode,
    NonFiniteGradientError,
    TrainConfig,
    average_checkpoints,
    batch_for_step,
    freeze_mask,
    greedy_generate,
    least_squares_slope,
    loss_fn,
    make_batch,
    replay_loss,
    step,
    train,
)

SMALL = SyntheticSpec(n_train=400, n_test=20, n_finetune=16)


@pytest.fixture(scope="module")
def tasks():
    return build_synthetic(0, SMALL, ["copy", "reverse"])


@pytest.fixture(scope="module")
def tok(tasks):
    return tasks.tokenizer()


def small_model(tok, **kw):
    base = dict(vocab_size=len(tok), d_model=16, d_ff=32, num_layers=2, num_heads=2, max_input_len=48, max_target_len=8)
    base.update(kw)
    return ModelConfig(**base)


# -- config -----------------------------------------------------------------------------


def test_train_config_round_trip():
    cfg = TrainConfig(freeze_mode="freeze_gate", steps=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"steps": 1, "momentum": 0.9})
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# -- batching and loss ------------------------------------------------------------------


def test_make_batch_masks_target_and_eos_only():
    tok = Tokenizer(["a", "b", "c", "Input:", "Output:", "go"])
    rec = TaskRecord("t", "go", "a b", "c a")
    cfg = ModelConfig(vocab_size=len(tok), d_model=8, d_ff=8, num_layers=1, num_heads=1)
    b = make_batch([rec, TaskRecord("t", "go", "a", "b")], tok, cfg)
    prompt = tok.encode("go Input: a b Output:")
    p = len(prompt)
    assert b.prefix_len[0] == p
    assert b.ids[0, :p].tolist() == prompt
    assert b.targets[0, p - 1:p + 2].tolist() == tok.encode("c a") + [tok.eos_id]
    assert np.all(b.targets[0, : p - 1] == IGNORE_ID)
    assert b.loss_mask[0].sum() == 3 and b.loss_mask[1].sum() == 2
    # the shorter row is padded and marked invalid
    assert not b.valid[1, -1] and b.ids[1, -1] == tok.pad_id


def test_prompt_left_truncation():
    tok = Tokenizer(["a", "go", "Input:", "Output:"])
    cfg = ModelConfig(vocab_size=len(tok), d_model=8, d_ff=8, num_layers=1, num_heads=1, max_input_len=3)
    b = make_batch([TaskRecord("t", "go", "a a a a", "a")], tok, cfg)
    assert b.prefix_len[0] == 3
    assert b.ids[0, 2] == tok.encode("Output:")[0]


def _batch_from_targets(targets):
    targets = np.asarray(targets)
    return Batch(
        ids=np.zeros_like(targets), targets=targets, loss_mask=(targets != IGNORE_ID).astype(np.int8),
        prefix_len=np.ones(targets.shape[0], dtype=np.int64), valid=np.ones(targets.shape, bool), task_ids=[],
    )


def test_uniform_logits_give_log_vocab():
    b = _batch_from_targets([[3, IGNORE_ID, 7], [IGNORE_ID, 0, 31]])
    total, lm = loss_fn(DiffTensor(np.zeros((2, 3, 32))), b)
    assert abs(float(lm.values) - math.log(32)) < 1e-9
    assert float(total.values) == float(lm.values)


def test_aux_is_added_to_total():
    b = _batch_from_targets([[1, 2]])
    total, lm = loss_fn(DiffTensor(np.zeros((1, 2, 4))), b, DiffTensor(np.array(0.25)))
    assert abs(float(total.values) - float(lm.values) - 0.25) < 1e-12


def test_empty_loss_mask_raises():
    with pytest.raises(DegenerateBatchError):
        loss_fn(DiffTensor(np.zeros((1, 2, 4))), _batch_from_targets([[IGNORE_ID, IGNORE_ID]]))


def test_batches_are_seeded_per_step(tasks, tok):
    mcfg, tcfg = small_model(tok), TrainConfig(batch_size=4)
    a = batch_for_step(tasks.train, tok, mcfg, tcfg, 3)
    b = batch_for_step(tasks.train, tok, mcfg, tcfg, 3)
    c = batch_for_step(tasks.train, tok, mcfg, tcfg, 4)
    assert np.array_equal(a.ids, b.ids) and not np.array_equal(a.ids, c.ids)


# -- optimizer --------------------------------------------------------------------------


def _one_param(values, role=Role.DENSE):
    p = ModelParams()
    p.add("w", np.asarray(values, dtype=np.float64), role)
    return p


def test_adam_matches_scalar_oracle():
    cfg = TrainConfig(learning_rate=0.01)
    grads = [0.5, -1.0, 2.0, 0.0, 0.3]
    p = _one_param([1.0])
    state = AdamState()
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p["w"].grad = np.array([g])
        step(p, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p["w"].values[0] - w) < 1e-15


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_zero_gradients_leave_params_unchanged(values, n):
    p = _one_param(values)
    before = p["w"].values.copy()
    state = AdamState()
    for _ in range(n):
        p["w"].grad = np.zeros_like(before)
        step(p, state, TrainConfig(learning_rate=0.1))
    assert np.array_equal(p["w"].values, before)


def test_nonfinite_gradient_names_parameter():
    p = _one_param([1.0, 2.0])
    p["w"].grad = np.array([0.0, np.nan])
    with pytest.raises(NonFiniteGradientError, match="w"):
        step(p, AdamState(), TrainConfig())
    assert np.array_equal(p["w"].values, [1.0, 2.0])


def test_freeze_masks_follow_roles():
    cfg = ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2)
    params = init_params(cfg, 0)
    gate = freeze_mask(params, FreezeMode.FREEZE_GATE)
    expert = freeze_mask(params, FreezeMode.FREEZE_EXPERT)
    assert gate == set(params.names(Role.GATE)) and expert == set(params.names(Role.EXPERT))
    assert freeze_mask(params, FreezeMode.FREEZE_MOE) == gate | expert
    assert freeze_mask(params, FreezeMode.NONE) == set()
    dense = init_params(ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2, moe_pattern="none"), 0)
    assert all(freeze_mask(dense, m) == set() for m in FreezeMode)


@pytest.mark.parametrize("mode", ["freeze_gate", "freeze_expert", "freeze_moe"])
def test_frozen_parameters_are_bit_identical(mode, tasks, tok):
    mcfg = small_model(tok)
    init = init_params(mcfg, 0)
    res = train(mcfg, TrainConfig(learning_rate=3e-3, batch_size=4, steps=5, freeze_mode=mode), tasks.train, tok, init=init)
    frozen = freeze_mask(init, mode)
    assert frozen
    for n in init:
        same = res.params[n].values.tobytes() == init[n].values.tobytes()
        assert same == (n in frozen), n


# -- checkpoints ------------------------------------------------------------------------


def test_average_of_one_is_identity(tmp_path):
    cfg = ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2)
    p = init_params(cfg, 0)
    path = save_checkpoint(tmp_path / "a.ckpt", cfg, p)
    _, avg = average_checkpoints([path])
    assert all(avg[n].values.tobytes() == p[n].values.tobytes() for n in p)


def test_average_matches_recomputation(tmp_path):
    cfg = ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2, dtype="float64")
    params = [init_params(cfg, s) for s in range(3)]
    paths = [save_checkpoint(tmp_path / f"{i}.ckpt", cfg, p) for i, p in enumerate(params)]
    _, avg = average_checkpoints(paths)
    for n in params[0]:
        ref = sum(p[n].values for p in params) / 3
        assert np.max(np.abs(avg[n].values - ref)) < 1e-12


def test_average_of_opposites_is_zero(tmp_path):
    cfg = ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2, dtype="float64")
    p = init_params(cfg, 0)
    q = p.copy()
    for n in q:
        q[n].values = -q[n].values
    _, avg = average_checkpoints([save_checkpoint(tmp_path / "p.ckpt", cfg, p), save_checkpoint(tmp_path / "q.ckpt", cfg, q)])
    assert all(np.all(avg[n].values == 0) for n in avg)


def test_average_rejects_config_mismatch(tmp_path):
    a = ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2)
    b = ModelConfig(vocab_size=32, d_model=16, d_ff=32, num_layers=2, num_heads=2, dropout=0.1)
    pa = save_checkpoint(tmp_path / "a.ckpt", a, init_params(a, 0))
    pb = save_checkpoint(tmp_path / "b.ckpt", b, init_params(b, 0))
    with pytest.raises(ValueError):
        average_checkpoints([pa, pb])
    with pytest.raises(ValueError):
        average_checkpoints([])


# -- training loop ----------------------------------------------------------------------


def test_zero_steps_returns_init(tasks, tok):
    mcfg = small_model(tok)
    res = train(mcfg, TrainConfig(steps=0), tasks.train, tok)
    init = init_params(mcfg, 0)
    assert all(res.params[n].values.tobytes() == init[n].values.tobytes() for n in init)
    assert res.metrics == []


def test_training_is_deterministic(tmp_path, tasks, tok):
    mcfg = small_model(tok)
    tcfg = TrainConfig(learning_rate=3e-3, batch_size=4, steps=4, checkpoint_every=2, average_last_n=2)
    train(mcfg, tcfg, tasks.train, tok, tmp_path / "a")
    train(mcfg, tcfg, tasks.train, tok, tmp_path / "b")
    for name in ["metrics.jsonl", "usage.jsonl", "final.ckpt", "averaged.ckpt", "checkpoints/step_000002.ckpt"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_replay_from_checkpoint(tmp_path, tasks, tok):
    mcfg = small_model(tok)
    tcfg = TrainConfig(learning_rate=3e-3, batch_size=4, steps=6, checkpoint_every=3)
    res = train(mcfg, tcfg, tasks.train, tok, tmp_path)
    logged = {m["step"]: m["loss"] for m in res.metrics}
    assert abs(replay_loss(tmp_path / "checkpoints" / "step_000003.ckpt", tcfg, tasks.train, tok, 4) - logged[4]) < 1e-5
    _, final, meta = load_checkpoint(tmp_path / "final.ckpt")
    assert meta["step"] == 6


def test_metrics_records(tasks, tok):
    res = train(small_model(tok), TrainConfig(learning_rate=3e-3, batch_size=4, steps=3), tasks.train, tok)
    rec = res.metrics[-1]
    assert set(rec) == {"step", "loss", "lm_loss", "aux_loss", "dropped_fraction", "per_layer_usage"}
    assert abs(rec["loss"] - rec["lm_loss"] - rec["aux_loss"]) < 1e-5
    assert set(rec["per_layer_usage"]) == {"1"}


def test_vocab_too_small_is_rejected(tasks, tok):
    with pytest.raises(ValueError):
        train(small_model(tok, vocab_size=4), TrainConfig(steps=1), tasks.train, tok)


def test_copy_loss_falls_and_keeps_falling(tok):
    ts = build_synthetic(0, SMALL, ["copy"])
    mcfg = small_model(tok, d_model=32, d_ff=64, router=RouterConfig(num_experts=4, top_k=2))
    res = train(mcfg, TrainConfig(learning_rate=3e-3, batch_size=16, steps=300), ts.train, tok)
    losses = [m["lm_loss"] for m in res.metrics]
    assert np.mean(losses[-20:]) < 0.1 * np.mean(losses[:5])
    assert least_squares_slope(losses[-200:]) <= 0


def test_least_squares_slope():
    assert abs(least_squares_slope([1, 3, 5, 7]) - 2) < 1e-12
    assert least_squares_slope([4.0]) == 0.0


def test_greedy_generate_stops_at_limit(tasks, tok):
    mcfg = small_model(tok)
    out = greedy_generate(init_params(mcfg, 0), mcfg, tok, ["copy the sequence Input: a b Output:"] * 3, 2, batch_size=2)
    assert len(out) == 3 and len(set(out)) == 1
    assert len(out[0].split()) <= 2
