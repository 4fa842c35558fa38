import json

import numpy as np
import pytest

import oracles
from uad.calibration import assign_bins, compute_ece
from uad.errors import InvalidConfig, InvalidInput
from uad.pipeline import (
    REPORT_SCHEMA,
    PipelineConfig,
    emit_reliability_csv,
    ensemble_average_baseline,
    evaluate,
    load_bundle,
    load_config,
    parse_config_text,
    read_reliability_csv,
    run_pipeline,
    train_sources,
)
from uad.selection import ModelZoo
from uad.synth import base_means
from uad.trainer import LabeledDataset, MlpClassifier

SMALL = dict(samples_per_class=60, source_epochs=5, adapt_epochs=3)


def ds(labels):
    return LabeledDataset(np.zeros((len(labels), 1)), labels)


# evaluate


def test_evaluate_perfect():
    y = [0, 1, 2, 2, 1]
    ev = evaluate(np.array(y), ds(y), 3)
    assert ev["accuracy"] == 1.0
    np.testing.assert_array_equal(ev["confusion"], np.diag([1, 2, 2]))


def test_evaluate_constant_predictor():
    y = np.repeat(np.arange(4), 5)
    assert evaluate(np.zeros(20, dtype=int), ds(y), 4)["accuracy"] == 0.25


def test_evaluate_hand_table():
    y = [0, 1, 1, 2, 0]
    pred = [0, 1, 2, 2, 1]
    ev = evaluate(np.array(pred), ds(y), 3)
    assert ev["accuracy"] == pytest.approx(0.6)
    np.testing.assert_array_equal(ev["confusion"], [[1, 1, 0], [0, 1, 1], [0, 0, 1]])


def test_evaluate_errors():
    with pytest.raises(InvalidInput):
        evaluate(np.array([0]), ds([0, 1]))


# ensemble baseline


def test_ensemble_hand_average():
    zoo = ModelZoo.from_logits({"a": np.log([[0.6, 0.4]]), "b": np.log([[0.3, 0.7]])})
    assert ensemble_average_baseline(zoo).tolist() == [1]


def test_ensemble_identical_models(rng):
    l = rng.normal(size=(30, 4))
    zoo = ModelZoo.from_logits({"a": l, "b": l.copy(), "c": l.copy()})
    np.testing.assert_array_equal(ensemble_average_baseline(zoo), l.argmax(1))


def test_ensemble_brute_force(rng):
    sets = [rng.normal(scale=2, size=(20, 5)) for _ in range(3)]
    zoo = ModelZoo.from_logits({f"m{j}": s for j, s in enumerate(sets)})
    assert ensemble_average_baseline(zoo).tolist() == oracles.ensemble([s.tolist() for s in sets])


# reliability csv


def test_reliability_csv_sparse(tmp_path):
    p = emit_reliability_csv(assign_bins([0.95, 0.99], [True, True], 10), tmp_path / "r.csv")
    rows = read_reliability_csv(p)
    assert len(rows) == 10
    nonzero = [r for r in rows if r["count"]]
    assert len(nonzero) == 1 and nonzero[0]["bin_low"] == 0.9 and nonzero[0]["bin_high"] == 1.0


def test_reliability_csv_hand_example(tmp_path):
    bins = assign_bins([0.75, 0.75, 0.55, 0.55], [True, True, False, False], 10)
    rows = [r for r in read_reliability_csv(emit_reliability_csv(bins, tmp_path / "r.csv")) if r["count"]]
    assert [(r["mean_conf"], r["mean_acc"]) for r in rows] == [(0.55, 0.0), (0.75, 1.0)]


def test_reliability_csv_recomputes_ece(tmp_path, rng):
    c = rng.random(500)
    bins = assign_bins(c, rng.random(500) < c, 10)
    rows = read_reliability_csv(emit_reliability_csv(bins, tmp_path / "r.csv"))
    n = sum(r["count"] for r in rows)
    recomputed = sum(r["count"] / n * abs(r["mean_acc"] - r["mean_conf"]) for r in rows)
    assert recomputed == pytest.approx(compute_ece(bins), abs=1e-9)


# config


def test_config_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 7\nhidden = 32,16  # two layers\ntemperature_scaling = off\n\nlabel_source=oracle\n")
    cfg = load_config(p, n_sources=2)
    assert (cfg.seed, cfg.hidden, cfg.temperature_scaling, cfg.label_source, cfg.n_sources) == (
        7, (32, 16), False, "oracle", 2,
    )


@pytest.mark.parametrize(
    "text", ["bogus = 1", "seed", "seed = x", "model_level = maybe", "shift_profile = wild", "grid_min = 0"]
)
def test_config_errors(text):
    with pytest.raises(InvalidConfig):
        load_config(None, **parse_config_text(text))


def test_missing_config_file(tmp_path):
    with pytest.raises(InvalidConfig):
        load_config(tmp_path / "nope.cfg")


# run_pipeline


@pytest.fixture(scope="module")
def small_run():
    cfg = PipelineConfig(**SMALL, seed=1)
    bundle = load_bundle(cfg)
    models = train_sources(cfg, bundle[0], bundle[1], 4)
    return cfg, bundle, models


def test_ablation_floor(small_run):
    cfg, bundle, models = small_run
    r = run_pipeline(cfg.replace(model_level=False, instance_level=False, temperature_scaling=False), models, bundle)
    assert set(r) == {"schema", "seed", "config", "sources", "baselines"}
    assert r["schema"] == REPORT_SCHEMA and len(r["sources"]) == 3


def test_full_report_invariants(small_run):
    cfg, bundle, models = small_run
    r = run_pipeline(cfg, models, bundle)
    accs = [s["target_accuracy"] for s in r["sources"]] + [r["final_accuracy"], r["baselines"]["ensemble_average"]]
    accs += [e["accuracy"] for e in r["epochs"]]
    assert all(0 <= a <= 1 for a in accs)
    assert r["init_model"] in bundle[1]
    assert len(r["epochs"]) == 3 and len(r["calibration"]) == 3
    assert list(r)[:5] == ["schema", "seed", "config", "sources", "baselines"]


def test_ts_disabled_means_raw_selection(small_run):
    cfg, bundle, models = small_run
    r = run_pipeline(cfg.replace(temperature_scaling=False, score_only=True), models, bundle)
    assert all(s["temperature"] == 1.0 for s in r["sources"])
    assert all(s["calibrated_mean_margin"] == s["mean_margin"] for s in r["sources"])
    raw = max(r["sources"], key=lambda s: s["mean_margin"])["model_id"]
    assert r["init_model"] == raw and r["calibration"] == []
    assert "final_accuracy" not in r and r["score_only_accuracy"] == r["pseudo_label_accuracy"]


def test_i_only_initializes_from_first_source(small_run):
    cfg, bundle, models = small_run
    r = run_pipeline(cfg.replace(model_level=False, score_only=True), models, bundle)
    assert r["init_model"] == bundle[1][0]


def nearest_mean_model(means, sharpness=20.0):
    # logits_c = s * (2 x.mu_c - |mu_c|^2): argmax is the nearest class mean
    w = sharpness * 2 * means.T
    b = -sharpness * (means**2).sum(1)
    return MlpClassifier([means.shape[1], means.shape[0]], [w], [b])


def test_oracle_source_carries_through(small_run):
    cfg, bundle, models = small_run
    from uad.synth import make_benchmark

    layout = make_benchmark(3, cfg.shift_profile, cfg.seed, samples_per_class=1).target_spec.layout_seed
    oracle = nearest_mean_model(base_means(4, 8, layout))
    swapped = [models[0], oracle, models[2]]
    r = run_pipeline(cfg, swapped, bundle)
    oracle_acc = r["sources"][1]["target_accuracy"]
    assert oracle_acc >= 0.97
    assert r["final_accuracy"] >= oracle_acc - 0.01


def test_stage_error_names_stage(small_run):
    from uad.pipeline import StageError

    cfg, bundle, models = small_run
    bad = [MlpClassifier.init([3, 4], np.random.default_rng(0))] * 3  # wrong input width
    with pytest.raises(StageError, match="logits"):
        run_pipeline(cfg, bad, bundle)


def test_pipeline_determinism(tmp_path):
    cfg = PipelineConfig(**SMALL, seed=3, out_dir=str(tmp_path / "run"))

    def snapshot():
        return {p.relative_to(tmp_path): p.read_bytes() for p in sorted((tmp_path / "run").rglob("*")) if p.is_file()}

    run_pipeline(cfg)
    first = snapshot()
    import shutil

    shutil.rmtree(tmp_path / "run")
    run_pipeline(cfg)
    second = snapshot()
    assert first == second
    names = {str(p) for p in first}
    assert {"run/report.json", "run/target_model.uadm", "run/pseudo_labels.csv"} <= names
    assert json.loads(first[next(p for p in first if str(p) == "run/report.json")])["seed"] == 3


def test_source_cache_reused(tmp_path, caplog):
    cfg = PipelineConfig(**SMALL, seed=2, out_dir=str(tmp_path), model_level=False, instance_level=False)
    run_pipeline(cfg)
    before = (tmp_path / "sources" / "source_1.uadm").stat().st_mtime_ns
    with caplog.at_level("INFO", logger="uad.pipeline"):
        run_pipeline(cfg)
    assert "reusing cached source model" in caplog.text
    assert (tmp_path / "sources" / "source_1.uadm").stat().st_mtime_ns == before
