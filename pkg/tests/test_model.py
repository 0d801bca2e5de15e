import math

import numpy as np
import pytest

from flatformer.errors import ConfigError, DataError
from flatformer.features import augment, make_batch
from flatformer.model import ModelConfig, build_variant, sinusoidal_pe
from flatformer.model.bias import build_masks, causal_mask, forgetting_bias, multi_rate_ladder
from flatformer.numerics import tensor as T
from flatformer.numerics.gradcheck import check_gradients
from flatformer.numerics.tensor import Tensor

SMALL = dict(n_exercises=5, d=8, n_layers=1, n_heads=2, max_len=16, dropout=0.0, n_session_embeddings=8)


def random_sequences(n, length, n_exercises=5, seed=0, gap_prob=0.2):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        L = length if isinstance(length, int) else int(rng.integers(*length))
        gaps = np.where(rng.random(L) < gap_prob, rng.uniform(601, 5000, L), rng.exponential(3.0, L))
        out.append(augment(f"u{i}", rng.integers(1, n_exercises + 1, L), rng.integers(0, 2, L), np.cumsum(gaps)))
    return out


def zero_all(model):
    for p in model.parameters().values():
        if not p.name.endswith("gain"):
            p.data[...] = 0.0


# -- step encoding and embeddings ---------------------------------------------------


def test_pe_at_zero():
    pe = sinusoidal_pe(np.array([0]), 6)[0]
    assert pe[0::2].tolist() == [0, 0, 0] and pe[1::2].tolist() == [1, 1, 1]


def test_pe_d4_tau1():
    np.testing.assert_allclose(sinusoidal_pe(np.array([1]), 4)[0],
                               [math.sin(1), math.cos(1), math.sin(1e-2), math.cos(1e-2)], rtol=0, atol=1e-15)


def test_pe_extrapolates():
    pe = sinusoidal_pe(np.array([10**6]), 128)
    assert np.all(np.isfinite(pe)) and np.all(np.abs(pe) <= 1)


def test_zero_tables_give_step_encoding_only():
    model = build_variant(ModelConfig(**SMALL))
    for name in ("E_Q", "E_A", "E_S"):
        model.params[name].data[...] = 0.0
    batch = make_batch(random_sequences(2, 7))
    x = model.embed(batch).data
    np.testing.assert_array_equal(x, sinusoidal_pe(batch.session_steps, 8))


def test_first_step_uses_start_answer_row():
    model = build_variant(ModelConfig(**SMALL))
    for name in ("E_Q", "E_S"):
        model.params[name].data[...] = 0.0
    batch = make_batch(random_sequences(1, 4))
    x = model.embed(batch).data[0]
    pe = sinusoidal_pe(batch.session_steps[0], 8)
    np.testing.assert_allclose(x[0] - pe[0], model.params["E_A"].data[2])
    np.testing.assert_allclose(x[1] - pe[1], model.params["E_A"].data[batch.target[0, 0].astype(int)])


def test_identical_inputs_identical_rows():
    model = build_variant(ModelConfig(**SMALL))
    seq = augment("u", [3, 3], [1, 1], [0.0, 1000.0])  # two sessions, both at tau=0
    seq.session_ids[:] = 1
    # both rows: q=3, s=1, tau=0; they differ only through a_{t-1} (START vs 1)
    model.params["E_A"].data[1] = model.params["E_A"].data[2]
    x = model.embed(make_batch([seq])).data[0]
    np.testing.assert_array_equal(x[0], x[1])


def test_session_ids_wrap_modulo_table():
    model = build_variant(ModelConfig(**SMALL))
    seq = augment("u", [1, 1], [0, 0], [0.0, 1.0])
    x1 = model.embed(make_batch([seq])).data
    seq.session_ids[:] += 8
    x2 = model.embed(make_batch([seq])).data
    np.testing.assert_array_equal(x1, x2)


def test_out_of_vocab_exercise():
    model = build_variant(ModelConfig(**SMALL))
    with pytest.raises(DataError):
        model.forward(make_batch([augment("u", [6, 1, 1], [0, 1, 0], [0.0, 1, 2])]))


def test_positional_variant_rejects_long_sequences():
    model = build_variant(ModelConfig(**{**SMALL, "variant": "no_session"}))
    with pytest.raises(DataError):
        model.forward(make_batch(random_sequences(1, 17)))


# -- forgetting bias and masks --------------------------------------------------------


def test_forgetting_bias_example():
    lag = np.tril(np.subtract.outer([0.0, 30, 60], [0.0, 30, 60]))
    m = forgetting_bias(lag, 60.0, 0.1)
    assert m[2, 0] == pytest.approx(-0.1 * math.log(2), abs=1e-15)
    assert m[2, 0] == pytest.approx(-0.06931, abs=1e-5)
    assert np.all(np.diag(m) == 0) and np.all(m <= 0)
    assert np.all(forgetting_bias(lag, 60.0, 0.0) == 0)


def test_forgetting_bias_per_head():
    lag = np.tril(np.subtract.outer([0.0, 5, 10], [0.0, 5, 10]))
    rates = multi_rate_ladder(8)
    assert rates.tolist() == [0.0125, 0.025, 0.05, 0.1, 0.2, 0.4, 0.4, 0.4]
    m = forgetting_bias(lag, 10.0, rates)
    assert m.shape == (8, 3, 3)
    np.testing.assert_allclose(m[3], forgetting_bias(lag, 10.0, 0.1))


def test_forgetting_bias_negative_lag():
    with pytest.raises(DataError):
        forgetting_bias(np.array([[0.0, 0], [-1, 0]]), 1.0, 0.1)


def test_causal_mask_values():
    m = causal_mask(3)
    assert np.all(np.tril(m) == 0) and np.all(m[np.triu_indices(3, 1)] == T.MASK_VALUE)


def test_zero_query_key_uniform_over_prefix():
    model = build_variant(ModelConfig(**{**SMALL, "beta": 0.0}))
    for l in range(1):
        model.params[f"layers.{l}.W_Q"].data[...] = 0
        model.params[f"layers.{l}.W_K"].data[...] = 0
    out = model.forward(make_batch(random_sequences(1, 6)), return_attention=True)
    w = out.attention[0][0, 0]
    for t in range(6):
        np.testing.assert_allclose(w[t, : t + 1], 1.0 / (t + 1), rtol=0, atol=1e-15)
        assert np.all(w[t, t + 1:] == 0.0)


def test_zero_query_key_with_forgetting_decreases_toward_older():
    model = build_variant(ModelConfig(**{**SMALL, "beta": 0.5}))
    model.params["layers.0.W_Q"].data[...] = 0
    model.params["layers.0.W_K"].data[...] = 0
    seq = augment("u", [1, 2, 3, 4, 5], [0, 1, 0, 1, 1], [0.0, 3, 10, 20, 45])
    w = model.forward(make_batch([seq]), return_attention=True).attention[0][0, 0]
    for t in range(1, 5):
        assert np.all(np.diff(w[t, : t + 1]) > 0)


def test_additive_bias_equals_multiplicative_decay(rng):
    ts = np.cumsum(rng.exponential(50, 12))
    lag = np.tril(np.subtract.outer(ts, ts))
    m = forgetting_bias(lag, ts[-1] - ts[0], 0.3)
    a = rng.standard_normal((12, 12))
    mask = causal_mask(12)
    additive = T.softmax_lastdim(Tensor(a + m + mask)).data
    mult = np.tril(np.exp(m) * np.exp(a))
    mult /= mult.sum(-1, keepdims=True)
    np.testing.assert_allclose(additive, mult, rtol=0, atol=1e-9)


def test_mask_bundle_combines_padding():
    batch = make_batch(random_sequences(2, (3, 6), seed=4))
    masks = build_masks(batch.log_lag, batch.valid, 0.1)
    assert masks.static.shape == (2, 1, batch.length, batch.length)
    pad_cols = ~batch.valid[0]
    assert np.all(masks.static[0, 0][:, pad_cols] <= T.MASK_VALUE / 2)


# -- forward contracts ---------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["full", "no_session", "no_forgetting", "backbone"])
def test_attention_rows_and_causality(variant):
    model = build_variant(ModelConfig(**{**SMALL, "variant": variant, "n_layers": 2}), seed=1)
    batch = make_batch(random_sequences(4, (3, 12), seed=2))
    out = model.forward(batch, return_attention=True)
    assert out.probs.shape == (4, batch.length)
    for w in out.attention:
        assert w.shape == (4, 2, batch.length, batch.length)
        upper = np.triu(np.ones((batch.length, batch.length), bool), 1)
        assert np.all(w[..., upper] == 0.0)
        for b in range(4):
            n = batch.lengths[b]
            np.testing.assert_allclose(w[b, :, :n, :n].sum(-1), 1.0, atol=1e-12)


def test_future_perturbation_leaves_past_unchanged():
    model = build_variant(ModelConfig(**{**SMALL, "n_layers": 2}), seed=3)
    seq = random_sequences(1, 10, seed=5)[0]
    base = model.predict(make_batch([seq]))[0]
    t = 4
    alt = seq.slice(0, 10)
    alt.exercise_ids = alt.exercise_ids.copy()
    alt.responses = alt.responses.copy()
    alt.exercise_ids[t + 1:] = 5 - alt.exercise_ids[t + 1:] + 1
    alt.responses[t:] = 1 - alt.responses[t:]
    alt.session_steps = alt.session_steps.copy()
    alt.session_steps[t + 1:] += 7
    new = model.predict(make_batch([alt]))[0]
    assert np.array_equal(new[: t + 1], base[: t + 1])
    assert not np.array_equal(new[t + 1:], base[t + 1:])


def test_zero_head_gives_half():
    model = build_variant(ModelConfig(**SMALL))
    for name in ("head.W1", "head.b1", "head.W2", "head.b2"):
        model.params[name].data[...] = 0
    p = model.predict(make_batch(random_sequences(2, 5)))
    assert np.all(p == 0.5)


def test_zero_weights_block_is_layernorm_of_input():
    model = build_variant(ModelConfig(**SMALL))
    zero_all(model)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 8)))
    masks = build_masks(np.zeros((1, 4, 4)), np.ones((1, 4), bool), 0.0)
    out = model.encoder_block(x, model.attention_bias(masks), 0).data
    ln = T.layernorm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out, ln, atol=1e-12)


def test_beta_zero_full_equals_no_forgetting():
    cfg = ModelConfig(**{**SMALL, "beta": 0.0})
    a = build_variant(cfg, seed=11)
    b = build_variant(cfg.with_(variant="no_forgetting"), seed=11)
    batch = make_batch(random_sequences(3, (4, 10)))
    np.testing.assert_array_equal(a.predict(batch), b.predict(batch))


def test_multi_rate_params_and_gradients():
    cfg = ModelConfig(**{**SMALL, "multi_rate": True, "n_heads": 4})
    model = build_variant(cfg, seed=0)
    assert model.params["beta_h"].data.tolist() == [0.0125, 0.025, 0.05, 0.1]
    batch = make_batch(random_sequences(2, 6))
    model.loss(batch).backward()
    assert np.all(model.params["beta_h"].grad != 0)
    assert "beta_h" not in build_variant(cfg.with_(variant="no_forgetting")).params


def test_post_ln_switch_changes_output():
    batch = make_batch(random_sequences(2, 6))
    a = build_variant(ModelConfig(**SMALL), seed=0).predict(batch)
    b = build_variant(ModelConfig(**{**SMALL, "norm_scheme": "post_ln"}), seed=0).predict(batch)
    assert a.shape == b.shape and np.abs(a - b).max() > 1e-9


def test_padding_does_not_change_predictions():
    model = build_variant(ModelConfig(**{**SMALL, "n_layers": 2}), seed=0)
    seqs = random_sequences(2, 9, seed=6)
    short = seqs[0].slice(0, 5)
    alone = model.predict(make_batch([short]))[0]
    padded = model.predict(make_batch([short, seqs[1]]))[0, :5]
    np.testing.assert_allclose(alone, padded, rtol=0, atol=1e-12)


def test_padded_positions_contribute_no_loss_or_gradient():
    model = build_variant(ModelConfig(**SMALL), seed=0)
    seqs = random_sequences(2, 9, seed=6)
    short = seqs[0].slice(0, 5)
    l1 = model.loss(make_batch([short]), reduction="sum")
    l1.backward()
    g1 = {k: p.grad.copy() for k, p in model.params.items()}
    for p in model.params.values():
        p.grad = None
    full = make_batch([short, seqs[1]])
    full.score[1] = False  # keep only the short sequence's steps
    l2 = model.loss(full, reduction="sum")
    l2.backward()
    assert l1.item() == pytest.approx(l2.item(), abs=1e-12)
    for k in g1:
        np.testing.assert_allclose(model.params[k].grad, g1[k], atol=1e-12)


def test_initial_loss_near_ln2():
    model = build_variant(ModelConfig(n_exercises=20, d=32, n_heads=4), seed=0)
    loss = model.loss(make_batch(random_sequences(8, 30, n_exercises=20))).item()
    assert abs(loss - math.log(2)) < 0.1


def test_dropout_only_in_training():
    model = build_variant(ModelConfig(**{**SMALL, "dropout": 0.4}), seed=0)
    batch = make_batch(random_sequences(2, 6))
    a, b = model.predict(batch), model.predict(batch)
    np.testing.assert_array_equal(a, b)
    rng = np.random.default_rng(0)
    c = model.forward(batch, training=True, rng=rng).probs.data
    assert not np.allclose(a, c)


# -- gradients -------------------------------------------------------------------------


@pytest.mark.parametrize("variant,multi", [("full", False), ("no_session", False), ("no_forgetting", False),
                                           ("backbone", False), ("full", True)])
def test_end_to_end_gradient_check(variant, multi):
    cfg = ModelConfig(**{**SMALL, "beta": 0.1, "variant": variant, "multi_rate": multi})
    model = build_variant(cfg, seed=2)
    batch = make_batch(random_sequences(2, 6, seed=8))
    errs = check_gradients(lambda: model.loss(batch), model.parameters(), max_entries=40)
    assert max(errs.values()) < 1e-4, errs


def test_gradient_check_through_one_block(rng):
    model = build_variant(ModelConfig(**{**SMALL, "dropout": 0.0}), seed=4)
    x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
    masks = build_masks(make_batch(random_sequences(2, 5)).log_lag, np.ones((2, 5), bool), 0.1)
    w = rng.standard_normal((2, 5, 8))
    params = {"x": x, **{k: v for k, v in model.params.items() if k.startswith("layers.0")}}
    errs = check_gradients(lambda: T.tsum(T.mul(model.encoder_block(x, model.attention_bias(masks), 0), Tensor(w))),
                           params, max_entries=30)
    assert max(errs.values()) < 1e-4, errs


# -- configuration -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(beta=-0.1)
    with pytest.raises(ConfigError):
        ModelConfig(variant="nope")


def test_config_round_trip(tmp_path):
    for v in ("full", "no_session", "no_forgetting", "backbone"):
        cfg = ModelConfig(variant=v, d=16, n_heads=4)
        path = tmp_path / f"{v}.json"
        path.write_text(__import__("json").dumps(cfg.to_dict()))
        assert ModelConfig.from_json(path) == cfg


def test_state_dict_round_trip():
    a = build_variant(ModelConfig(**SMALL), seed=0)
    b = build_variant(ModelConfig(**SMALL), seed=1)
    b.load_state_dict(a.state_dict())
    batch = make_batch(random_sequences(2, 5))
    np.testing.assert_array_equal(a.predict(batch), b.predict(batch))
    with pytest.raises(ConfigError):
        b.load_state_dict({"E_Q": np.zeros((6, 8))})
