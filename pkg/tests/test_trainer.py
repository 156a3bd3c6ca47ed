import dataclasses
import math
import warnings

import numpy as np
import pytest

from apgnn import tensor as tn
from apgnn import synthetic
from apgnn.data import TrainingInstance, make_instances
from apgnn.errors import ContractError, DataError, NumericError
from apgnn.gradcheck import run_micro
from apgnn.model import APGNN, collate, score_items
from apgnn.optim import Adam, adam_step
from apgnn.pgnn import AblationFlags, ParameterSet
from apgnn.tensor import Tensor
from apgnn.trainer import (
    Checkpoint,
    TrainConfig,
    Trainer,
    build_model,
    load_checkpoint,
    loss,
    make_rng,
    rank_instances,
    save_checkpoint,
    train,
)

from .conftest import check_grads

SMALL = dict(d=8, d_user=4, T=1, M=3, precision=64, batch_size=32)


@pytest.fixture(scope="module")
def toy():
    c = synthetic.markov_corpus(n_users=5, n_items=30, sessions_per_user=6)
    return c, make_instances(c, 3, 20)


# ------------------------------------------------------------------ scoring


def test_scores_pick_the_matching_embedding():
    E = Tensor(np.eye(5))
    assert int(np.argmax(score_items(Tensor(np.eye(5)[3]), E).data)) == 3


def test_zero_user_vector_scores_zero():
    assert not score_items(Tensor(np.zeros(4)), Tensor(np.ones((6, 4)))).data.any()


def test_scores_match_dot_product_loop(rng):
    z, E = rng.standard_normal(4), rng.standard_normal((7, 4))
    ref = [sum(z[k] * E[i, k] for k in range(4)) for i in range(7)]
    np.testing.assert_allclose(score_items(Tensor(z), Tensor(E)).data, ref, atol=1e-12)


# --------------------------------------------------------------------- loss


def test_loss_two_items_uniform():
    assert loss(Tensor([0.0, 0.0]), 0).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_loss_vanishes_for_a_confident_correct_prediction():
    assert loss(Tensor([60.0, 0.0, 0.0]), 0).item() < 1e-20


def test_loss_matches_formula(rng):
    s = rng.standard_normal((3, 6))
    labels = np.array([0, 5, 2])
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    y = np.eye(6)[labels]
    ref = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum(axis=1).mean()
    assert loss(Tensor(s), labels).item() == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 6, size=3)
    check_grads(lambda s: loss(s, labels), [r.standard_normal((3, 6))])


@pytest.mark.parametrize("label", [-1, 6])
def test_loss_label_out_of_range(label):
    with pytest.raises(ContractError):
        loss(Tensor(np.zeros(6)), label)


# --------------------------------------------------------------------- Adam


def test_adam_first_step_moves_by_lr():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([1.0])
    adam_step({"w": w}, lr=0.001)
    assert w.data[0] == pytest.approx(1 - 0.001, abs=1e-9)
    assert w.grad is None


def test_adam_zero_grad_leaves_parameters():
    w = Tensor([1.0, -2.0], requires_grad=True)
    w.grad = np.zeros(2)
    opt = Adam({"w": w})
    opt.step()
    assert w.data.tolist() == [1.0, -2.0] and opt.t == 1


def test_adam_converges_on_quadratic():
    w = Tensor([0.0], requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(100):
        tn.backward(((w - 3.0) * (w - 3.0)).sum())
        opt.step()
    assert abs(w.data[0] - 3.0) < 0.5


def test_adam_missing_grad_is_a_contract_error():
    a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    a.grad = np.ones(1)
    with pytest.raises(ContractError):
        Adam({"a": a, "b": b}).step()


def test_adam_weight_decay_shrinks_weights():
    w = Tensor([2.0], requires_grad=True)
    w.grad = np.zeros(1)
    Adam({"w": w}, lr=0.01, weight_decay=0.5).step()
    assert w.data[0] < 2.0


# ------------------------------------------------------------------- model


def test_batched_forward_equals_single_instances(toy):
    c, inst = toy
    model = build_model(TrainConfig(**SMALL), c.n_items, c.n_users)
    sel = inst[:: max(1, len(inst) // 12)]
    batched = model.forward(collate(sel)).data
    for k, x in enumerate(sel):
        np.testing.assert_allclose(batched[k], model.forward(collate([x])).data[0], atol=1e-12)


def test_attention_toggle_is_inert_without_history():
    r = np.random.default_rng(0)
    full = ParameterSet.initialize(20, 3, 6, 4, rng=r)
    off = AblationFlags(use_history_attention=False)
    no_att = ParameterSet((k, v) for k, v in full.items() if k not in ("W_Q", "W_K", "W_V"))
    inst = [TrainingInstance(user=1, history=(), prefix=(3, 4, 5), label=2), TrainingInstance(0, (), (7,), 1)]
    b = collate(inst)
    a = APGNN(full, 6, 2).forward(b).data
    z = APGNN(no_att, 6, 2, off).forward(b).data
    np.testing.assert_array_equal(a, z)


def test_parameter_set_matches_variant_so_every_tensor_gets_a_gradient(toy):
    c, inst = toy
    for name in ("full", "-U", "-A", "-P", "-A-P", "-A-P-U"):
        cfg = TrainConfig(**SMALL).with_flags(AblationFlags.from_name(name))
        t = Trainer(cfg, c.n_items, c.n_users)
        t.train_step(inst[:16])  # Adam raises if any parameter missed its gradient


# --------------------------------------------------------------- gradcheck


@pytest.mark.parametrize("variant", ["-U", "-A", "-P", "-A-P", "-A-P-U"])
@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_variants(variant, seed):
    # The query/key projections see a nearly flat softmax over at most two
    # history rows, so their gradients are ~1e-7; with h = 1e-5 the
    # difference quotient's roundoff (eps * L / h ~ 1e-10) is a visible
    # fraction of that, hence the larger step here.
    rep = run_micro(seed, 64, AblationFlags.from_name(variant), h=1e-4)
    assert rep.ok, rep.lines()


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_with_batch_norm_and_bias(seed):
    assert run_micro(seed, 64, batch_norm=True).ok
    assert run_micro(seed, 64, bias=True).ok


def test_gradcheck_catches_a_sign_flip():
    rep = run_micro(0, 64, fault="gru-candidate-sign")
    assert not rep.ok
    assert {c.name for c in rep.checks if not c.ok} >= {"U_o", "W_o"}


def test_gradcheck_32bit_warns_about_tolerance():
    with pytest.warns(UserWarning, match="1e-2"):
        rep = run_micro(0, 32)
    assert rep.tol == 1e-2 and rep.ok


# ------------------------------------------------------------------ trainer


def test_zero_instances_is_an_error():
    t = Trainer(TrainConfig(**SMALL), 10, 2)
    with pytest.raises(DataError):
        t.fit([], epochs=1)


def test_second_epoch_loss_is_lower(toy):
    c, inst = toy
    t = Trainer(TrainConfig(**{**SMALL, "lr": 0.01}), c.n_items, c.n_users)
    hist = t.fit(inst, epochs=2)
    assert hist[1]["train_loss"] < hist[0]["train_loss"]


def test_training_is_reproducible(toy):
    c, inst = toy
    runs = [Trainer(TrainConfig(**SMALL), c.n_items, c.n_users).fit(inst, epochs=1)[0]["train_loss"] for _ in range(2)]
    assert abs(runs[0] - runs[1]) <= 1e-12
    other = Trainer(TrainConfig(**{**SMALL, "seed": 1}), c.n_items, c.n_users).fit(inst, epochs=1)[0]["train_loss"]
    assert other != runs[0]


def test_validation_recall_is_reported(toy):
    c, inst = toy
    recs = []
    Trainer(TrainConfig(**SMALL), c.n_items, c.n_users).fit(inst, epochs=1, valid=inst[:20], callback=recs.append)
    assert 0.0 <= recs[0]["valid_recall@5"] <= 1.0


def test_nan_loss_names_the_first_bad_tensor(toy):
    c, inst = toy
    t = Trainer(TrainConfig(**SMALL), c.n_items, c.n_users)
    t.model.params["B"].data[0, 0] = np.inf
    with pytest.raises(NumericError, match=r"tape\[\d+\] op="):
        t.train_step(inst[:4])


@pytest.mark.parametrize("bits", [64, 32])
@pytest.mark.parametrize("batch_norm", [False, True])
def test_checkpoint_round_trip_preserves_logits(tmp_path, toy, bits, batch_norm):
    c, inst = toy
    cfg = TrainConfig(**{**SMALL, "precision": bits, "batch_norm": batch_norm})
    t = Trainer(cfg, c.n_items, c.n_users)
    t.fit(inst, epochs=1)
    path = tmp_path / "ck.bin"
    save_checkpoint(t.checkpoint(vocab_fp=123), path)
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.vocab_fingerprint == 123 and ck.epoch == 1
    before = t.model.scores(inst)
    after = ck.model().scores(inst)
    assert before.dtype == after.dtype == (np.float64 if bits == 64 else np.float32)
    assert before.tobytes() == after.tobytes()


def test_resumed_training_matches_uninterrupted(tmp_path, toy):
    c, inst = toy
    cfg = TrainConfig(**SMALL)
    straight = Trainer(cfg, c.n_items, c.n_users)
    straight.fit(inst, epochs=2)
    first = Trainer(cfg, c.n_items, c.n_users)
    first.fit(inst, epochs=1)
    save_checkpoint(first.checkpoint(), tmp_path / "ck.bin")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "ck.bin"))
    resumed.fit(inst, epochs=1)
    assert resumed.history[-1]["train_loss"] == straight.history[-1]["train_loss"]
    np.testing.assert_array_equal(resumed.model.scores(inst[:10]), straight.model.scores(inst[:10]))


def test_checkpoint_rejects_foreign_bytes(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_train_entry_point(toy):
    c, _ = toy
    ck = train(TrainConfig(**{**SMALL, "epochs": 1}), c)
    assert isinstance(ck, Checkpoint) and ck.epoch == 1 and ck.vocab_fingerprint
    assert set(ck.params) == set(ParameterSet.shapes(c.n_items, c.n_users, 8, 4))


def test_rank_instances_are_one_based(toy):
    c, inst = toy
    model = build_model(TrainConfig(**SMALL), c.n_items, c.n_users)
    ranks = rank_instances(model, inst)
    assert ranks.min() >= 1 and ranks.max() <= c.n_items and len(ranks) == len(inst)


# ------------------------------------------------------------------- config


def test_config_defaults_and_presets():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.l2, cfg.batch_size, cfg.max_session_len) == (0.001, 0.0, 100, 20)
    x = TrainConfig.preset("xing")
    assert (x.d, x.d_user, x.T, x.M, x.batch_norm) == (100, 50, 1, 50, True)
    r = TrainConfig.preset("reddit")
    assert (r.d, r.d_user, r.T, r.M, r.batch_norm) == (50, 50, 3, 30, False)


def test_config_round_trip_and_unknown_keys():
    cfg = TrainConfig(d=7, use_pgnn=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"d": 3, "dropout": 0.1})


def test_named_streams_are_independent_and_reproducible():
    a1, a2, b = make_rng(0, "init"), make_rng(0, "init"), make_rng(0, "shuffle")
    x1, x2, y = a1.random(5), a2.random(5), b.random(5)
    assert np.array_equal(x1, x2) and not np.array_equal(x1, y)
