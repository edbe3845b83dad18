import numpy as np
import pytest

from cause import tensor as T
from cause.datalog import SynthConfig, generate_synthetic, split
from cause.model import Batch, CauseModel, ModelConfig, init_params
from cause.tensor import Tensor, finite_diff_check
from cause.training import (AdamState, TrainConfig, action_loss, adam_step, infonce_loss, make_examples,
                            sample_negatives, total_loss, train)


def test_negatives_two_items():
    neg = sample_negatives(2, 50, 1, np.random.default_rng(0))
    assert np.all(neg == 0)


def test_negatives_exclude_positive_and_in_range():
    neg = sample_negatives(10_000, 200, 37, np.random.default_rng(1))
    assert neg.shape == (200,) and 37 not in neg
    assert neg.min() >= 0 and neg.max() < 10_000


def test_negatives_uniform():
    N, pos = 50, 13
    neg = sample_negatives(N, 1_000_000, pos, np.random.default_rng(2))
    counts = np.bincount(neg, minlength=N)
    assert counts[pos] == 0
    expect = 1_000_000 / (N - 1)
    others = np.delete(counts, pos)
    assert np.max(np.abs(others - expect) / expect) < 0.05
    assert abs(others.mean() - expect) / expect < 0.01


def test_negatives_batched_per_row():
    pos = np.array([0, 5, 9])
    neg = sample_negatives(10, 30, pos, np.random.default_rng(3))
    assert neg.shape == (3, 30)
    assert not np.any(neg == pos[:, None])


def test_negatives_single_item_rejected():
    with pytest.raises(ValueError):
        sample_negatives(1, 5, 0, np.random.default_rng(0))


def loss_params(N=300, D=6, seed=0):
    return init_params(ModelConfig(item_vocab=N, action_vocab=5, user_vocab=1, category_vocab=1,
                                   hidden_dim=D, num_heads=1, seed=seed))


def test_infonce_uniform_is_log_k_plus_one():
    p = loss_params()
    p["E_item"].data[:] = 1.0
    loss = infonce_loss(Tensor(np.ones(6)), 0, np.arange(1, 201), p, 0.1)
    assert abs(float(loss.data) - np.log(201)) < 1e-9


def test_infonce_saturates():
    p = loss_params()
    p["E_item"].data[:] = 0.0
    p["E_item"].data[0] = 10.0
    loss = infonce_loss(Tensor(np.ones(6)), 0, np.arange(1, 201), p, 0.1)
    assert 0 <= float(loss.data) < 1e-9


def test_infonce_gradient():
    p = loss_params(N=20)
    rng = np.random.default_rng(4)
    e = Tensor(rng.normal(size=6), requires_grad=True)
    neg = sample_negatives(20, 5, 3, rng)
    f = lambda: infonce_loss(e, 3, neg, p, 0.1)
    assert finite_diff_check(f, [e, p["E_item"]]) < 1e-4


def test_infonce_large_catalog_path_matches_small():
    # >4(K+1) rows takes the gather path; compare with the dense formula
    p = loss_params(N=300)
    rng = np.random.default_rng(5)
    e = rng.normal(size=6)
    neg = sample_negatives(300, 5, 7, rng)
    got = float(infonce_loss(Tensor(e), 7, neg, p, 0.3).data)
    s = p["E_item"].data[np.r_[7, neg]] @ e / 0.3
    ref = -(s[0] - np.log(np.exp(s - s.max()).sum()) - s.max())
    assert abs(got - ref) < 1e-10


def test_infonce_rejects_positive_in_negatives():
    with pytest.raises(ValueError):
        infonce_loss(Tensor(np.ones(6)), 2, [1, 2], loss_params(), 0.1)


def test_action_loss_uniform_and_gradient():
    p = loss_params()
    p["W_a"].data[:] = 0.0
    p["b_a"].data[:] = 0.0
    assert abs(float(action_loss(Tensor(np.ones(6)), 3, p).data) - np.log(5)) < 1e-12
    rng = np.random.default_rng(6)
    p["W_a"].data = rng.normal(size=(5, 6))
    e = Tensor(rng.normal(size=6), requires_grad=True)
    assert finite_diff_check(lambda: action_loss(e, 1, p), [e, p["W_a"], p["b_a"]]) < 1e-4


def test_action_label_out_of_range():
    with pytest.raises(ValueError):
        action_loss(Tensor(np.ones(6)), 5, loss_params())


def tiny_setup(seed=0, **kw):
    seqs, cat = generate_synthetic(SynthConfig(num_users=6, num_items=30, num_categories=4,
                                               events_per_user=20, seed=seed))
    base = dict(item_vocab=30, action_vocab=3, user_vocab=6, category_vocab=4, hidden_dim=8,
                num_layers=1, num_heads=1, max_recent=5, V_max=3, G_max=4, seed=seed)
    base.update(kw)
    cfg = ModelConfig(**base)
    return seqs, cat, cfg


def test_total_loss_decomposes():
    seqs, cat, cfg = tiny_setup()
    model = CauseModel(cfg, cat)
    batch = Batch.from_sequences(make_examples(seqs, cat, cfg))
    parts = total_loss(model, batch, np.random.default_rng(0), 10)
    assert parts.action is not None and parts.n_action == parts.n_item
    np.testing.assert_allclose(parts.total.data, parts.item.data + parts.action.data, rtol=1e-12)
    no_act = CauseModel(ModelConfig(**{**cfg.to_dict(), "use_action_head": False}), cat)
    no_act.load_state_dict(model.state_dict())
    p2 = total_loss(no_act, batch, np.random.default_rng(0), 10)
    assert p2.action is None
    np.testing.assert_allclose(p2.total.data, parts.item.data, rtol=1e-12)


def test_total_loss_merged_has_no_action_term():
    seqs, cat, cfg = tiny_setup(assembly_mode="merged")
    parts = total_loss(CauseModel(cfg, cat), make_examples(seqs, cat, cfg), np.random.default_rng(0), 10)
    assert parts.action is None and parts.n_item > 0


def test_end_to_end_gradient():
    seqs, cat, cfg = tiny_setup(dtype="float64")
    model = CauseModel(cfg, cat)
    examples = make_examples(seqs[:2], cat, cfg)
    B = Batch.from_sequences(examples)
    P = int((B.padded("item_targets") >= 0).sum())
    neg = sample_negatives(30, 4, B.padded("item_targets").reshape(-1)[B.padded("item_targets").reshape(-1) >= 0],
                           np.random.default_rng(0))
    assert neg.shape[0] == P
    f = lambda: total_loss(model, B, None, 4, neg_ids=neg).total
    names = ["E_item", "E_cat", "W_align", "layer0.Wq", "layer0.W1", "layer0.ln1.g", "W_a", "E_pos"]
    worst = max(finite_diff_check(f, model.params[n]) for n in names)
    assert worst < 1e-3


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    adam_step(p, g, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"].data, [0.99, -1.99, 0.49], atol=1e-7)


def test_adam_zero_gradient_noop():
    p = {"w": Tensor(np.array([1.0, 2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0]), requires_grad=True)
    st = AdamState()
    for _ in range(2000):
        x.grad = None
        T.backward(T.sum_(T.mul(x, x)))
        adam_step({"x": x}, {"x": x.grad}, st, lr=0.05)
    assert abs(x.data[0]) < 1e-2


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        adam_step({"w": Tensor(np.ones(2))}, {"w": np.array([np.nan, 1.0])}, AdamState(), lr=0.1)


def test_lr_zero_keeps_parameters_bit_identical():
    seqs, cat, cfg = tiny_setup()
    init = CauseModel(cfg, cat).state_dict()
    res = train(cfg, TrainConfig(learning_rate=0.0, epochs=2, negatives=5, batch_size=4), seqs, cat)
    for k, v in res.model.state_dict().items():
        assert v.tobytes() == init[k].tobytes()


def test_same_seed_identical_curves(tmp_path):
    seqs, cat, cfg = tiny_setup()
    sp = split(seqs)
    tc = TrainConfig(epochs=3, negatives=5, batch_size=4)
    a = train(cfg, tc, sp.train, cat, sp.val, log_path=tmp_path / "a.jsonl")
    b = train(cfg, tc, sp.train, cat, sp.val, log_path=tmp_path / "b.jsonl")
    assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
    assert [r["val_ndcg10"] for r in a.log] == [r["val_ndcg10"] for r in b.log]
    for k, v in a.model.state_dict().items():
        assert np.array_equal(v, b.model.state_dict()[k])
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 3


def test_training_reduces_loss():
    seqs, cat, cfg = tiny_setup()
    res = train(cfg, TrainConfig(epochs=15, negatives=10, batch_size=6, windows_per_user=3), seqs, cat)
    losses = [r["train_loss"] for r in res.log]
    assert losses[-1] < losses[0]


def test_make_examples_windows():
    seqs, cat, cfg = tiny_setup()
    one = make_examples(seqs, cat, cfg)
    three = make_examples(seqs, cat, cfg, windows_per_user=3)
    assert len(one) == 6 and len(three) == 18
    # the newest window predicts the last event
    assert one[0].item_targets[one[0].item_targets >= 0][-1] == seqs[0].events[-1].item_id


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(negatives=0)
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
