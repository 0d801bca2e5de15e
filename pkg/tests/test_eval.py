import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flatformer.errors import DataError
from flatformer.evaluation import (
    acc,
    auc,
    compare_latency,
    count_params,
    evaluate,
    expected_param_count,
    export_attention,
    flops_estimate,
    latency_bench,
    length_buckets,
    macro_auc,
    pairwise_auc,
    pre_gap_mass,
)
from flatformer.features import augment
from flatformer.model import ModelConfig, build_variant

SMALL = dict(n_exercises=6, d=8, n_layers=1, n_heads=2, max_len=32, dropout=0.0, n_session_embeddings=8)


def gap_sequence(n=12, gap_at=6, student="u"):
    ts = np.r_[np.arange(gap_at) * 2.0, 2000.0 + np.arange(n - gap_at) * 2.0]
    rng = np.random.default_rng(1)
    return augment(student, rng.integers(1, 7, n), rng.integers(0, 2, n), ts)


# -- AUC / ACC ----------------------------------------------------------------


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.4, 0.4, 0.4], [1, 0, 1]) == 0.5
    assert auc([0.1, 0.9], [1, 0]) == 0.0
    assert auc([0.3, 0.7], [1, 1]) is None


def test_auc_size_mismatch():
    with pytest.raises(DataError):
        auc([0.1, 0.2], [1])


def test_auc_matches_pairwise_oracle_up_to_500():
    rng = np.random.default_rng(0)
    for n in (2, 3, 10, 57, 200, 333, 500):
        for _ in range(5):
            scores = rng.integers(0, 12, n) / 11.0 if n % 2 else rng.random(n)  # heavy ties on odd n
            labels = rng.integers(0, 2, n)
            labels[0], labels[-1] = 0, 1
            assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.booleans()), min_size=2, max_size=80))
def test_auc_property_against_oracle(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    a, b = auc(s, y), pairwise_auc(s, y)
    assert (a is None) == (b is None)
    if a is not None:
        assert abs(a - b) <= 1e-12 and 0.0 <= a <= 1.0


def test_acc_examples():
    assert acc([0.6, 0.4], [1, 0]) == 1.0
    assert acc([0.5], [1]) == 1.0 and acc([0.5], [0]) == 0.0
    assert acc([0.2, 0.9], [1, 0]) == 0.0
    with pytest.raises(DataError):
        acc([], [])


def test_macro_auc():
    s = [0.9, 0.1, 0.2, 0.8, 0.5]
    y = [1, 0, 1, 0, 1]
    g = ["a", "a", "b", "b", "c"]
    assert macro_auc(s, y, g) == pytest.approx(0.5)


# -- length buckets --------------------------------------------------------------


def test_single_bucket_is_global_auc():
    rng = np.random.default_rng(3)
    s, y = rng.random(100), rng.integers(0, 2, 100)
    rows = length_buckets(s, y, np.full(100, 20), boundaries=())
    assert len(rows) == 1 and rows[0]["auc"] == auc(s, y)


def test_buckets_partition_and_labels():
    rng = np.random.default_rng(4)
    n = 400
    s, y, lengths = rng.random(n), rng.integers(0, 2, n), rng.integers(1, 400, n)
    rows = length_buckets(s, y, lengths)
    assert [r["bucket"] for r in rows] == ["<50", "50-100", "100-200", ">200"]
    assert sum(r["count"] for r in rows) == n
    for r in rows:
        sel = (lengths >= r["lo"]) & ((lengths < r["hi"]) if r["hi"] else True)
        assert r["auc"] == auc(s[sel], y[sel])
    # pooled global AUC lies within the range of the bucket AUCs' spread plus noise
    bucket_aucs = [r["auc"] for r in rows]
    assert min(bucket_aucs) - 0.1 <= auc(s, y) <= max(bucket_aucs) + 0.1


def test_one_class_bucket_reports_none():
    rows = length_buckets([0.2, 0.7, 0.4, 0.6], [1, 1, 0, 1], [10, 20, 60, 70])
    assert rows[0]["auc"] is None and rows[1]["auc"] == 1.0


# -- parameter and FLOP accounting -------------------------------------------------


@pytest.mark.parametrize("variant", ["full", "no_session", "no_forgetting", "backbone"])
@pytest.mark.parametrize("multi", [False, True])
def test_param_count_matches_closed_form(variant, multi):
    cfg = ModelConfig(n_exercises=37, d=16, n_heads=4, n_layers=2, variant=variant, multi_rate=multi)
    assert count_params(build_variant(cfg)) == expected_param_count(cfg)


def test_session_table_size_at_defaults():
    cfg = ModelConfig(n_exercises=1000)
    counts = expected_param_count(cfg)
    assert counts["session_embedding"] == 512 * 128 == 65_536 < 100_000
    assert counts["forgetting"] == 0


def test_forgetting_costs_no_parameters():
    cfg = ModelConfig(n_exercises=50, d=16, n_heads=4)
    full = count_params(build_variant(cfg))
    nf = count_params(build_variant(cfg.with_(variant="no_forgetting")))
    assert full["total"] == nf["total"]
    mr = count_params(build_variant(cfg.with_(multi_rate=True, n_heads=8)))
    assert mr["forgetting"] == 8 and mr["total"] - full["total"] == 8


def test_full_minus_backbone_difference():
    cfg = ModelConfig(n_exercises=50, d=16, n_heads=4)
    full = count_params(build_variant(cfg))["total"]
    back = count_params(build_variant(cfg.with_(variant="backbone")))["total"]
    # session table replaces the positional table; the backbone adds a d-wide time channel
    assert full - back == cfg.n_session_embeddings * cfg.d - cfg.max_len * cfg.d - cfg.d


def test_flops_scaling_and_share():
    cfg = ModelConfig(n_exercises=100)
    f200, f400 = flops_estimate(cfg, 200), flops_estimate(cfg, 400)
    assert f400["attention_scores"] == 4 * f200["attention_scores"]
    assert f200["injection_share"] < 0.01
    one = flops_estimate(cfg, 1)
    assert one["ffn"] > one["attention_scores"] + one["attention_values"]
    assert flops_estimate(cfg.with_(variant="no_forgetting"), 200)["bias_injection"] == 0.0
    # overhead share shrinks as the width grows
    assert flops_estimate(cfg.with_(d=256), 200)["injection_share"] < f200["injection_share"]


# -- evaluation, latency, attention export ------------------------------------------


def test_evaluate_report(tmp_path):
    model = build_variant(ModelConfig(**SMALL), seed=0)
    seqs = [gap_sequence(student=f"u{i}") for i in range(6)]
    rep = evaluate(model, seqs, batch_size=4, macro=True)
    assert rep.n_predictions == 72
    assert 0.0 <= rep.auc <= 1.0 and 0.0 <= rep.acc <= 1.0
    assert sum(r["count"] for r in rep.length_buckets) == 72
    path = rep.write_json(tmp_path / "r.json")
    assert path.exists()


def test_latency_stats():
    model = build_variant(ModelConfig(**SMALL), seed=0)
    one = latency_bench(model, batch_size=2, length=8, reps=1, warmup=0)
    assert one["reps"] == 1 and len(one["samples_ms"]) == 1
    stats = latency_bench(model, batch_size=2, length=8, reps=5, warmup=1)
    assert stats["p50_ms"] <= stats["p95_ms"] and stats["reps"] == 5


def test_compare_latency_interleaves():
    cfg = ModelConfig(**SMALL)
    res = compare_latency({"full": build_variant(cfg), "nf": build_variant(cfg.with_(variant="no_forgetting"))},
                          batch_size=2, length=8, reps=3, warmup=1)
    assert set(res) == {"full", "nf"} and all(r["reps"] == 3 for r in res.values())


def test_attention_export(tmp_path):
    model = build_variant(ModelConfig(**{**SMALL, "n_layers": 2}), seed=0)
    exp = export_attention(model, gap_sequence())
    assert exp.session_boundaries == [0, 6]
    assert exp.n_layers == 2 and exp.n_heads == 2
    for w in exp.weights:
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert np.all(np.triu(w[0], 1) == 0.0)
    paths = exp.write_csv(tmp_path)
    assert len(paths) == 4
    with open(paths[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 144 and set(rows[0]) == {"layer", "head", "query", "key", "weight"}
    assert (tmp_path / "sessions.csv").exists() and (tmp_path / "lags.csv").exists()
    mass = pre_gap_mass(exp, 6)
    assert 0.0 < mass < 1.0


def test_pre_gap_mass_lower_with_forgetting_for_content_blind_attention():
    cfg = ModelConfig(**{**SMALL, "beta": 0.5})
    masses = {}
    for v in ("full", "no_forgetting"):
        model = build_variant(cfg.with_(variant=v), seed=0)
        model.params["layers.0.W_Q"].data[...] = 0
        model.params["layers.0.W_K"].data[...] = 0
        masses[v] = pre_gap_mass(export_attention(model, gap_sequence()), 6)
    assert masses["full"] < masses["no_forgetting"]
