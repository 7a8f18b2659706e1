import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from vanbayes import cli, pipeline
from vanbayes.io import (
    MAGIC,
    FormatError,
    config_hash,
    export_batch_csv,
    load_batch,
    load_observed,
    read_batch_header,
    save_batch,
)
from vanbayes.simulators import ConfigError, ConjugateGaussian, SIRSpatial, make_sim_batch

CONFIG = {
    "model": {"name": "conjugate_gaussian", "n": 5},
    "seed": 21,
    "n_train": 20_000,
    "n_val": 2000,
    "block_size": 5000,
    "summaries": [],
    "arches": [[16, 8], [8]],
    "train": {"epochs": 20},
    "ks_gate": 0.08,
    "scenario": {"theta": [0.5], "replicates": 200},
}


def _write_config(path, **updates):
    cfg = {**CONFIG, **updates}
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    config = _write_config(root / "exp.yaml")
    out = root / "out"
    assert cli.main(["simulate", "--config", config, "--out", str(out)]) == 0
    assert cli.main(["train", "--config", config, "--out", str(out)]) == 0
    return config, out


class TestBatchFiles:
    def test_round_trip_is_bit_exact(self, tmp_path):
        batch = make_sim_batch(SIRSpatial(horizon=30.0, n_obs=4, target_time=30.0), 3, seed=1)
        path = tmp_path / "b.vbb"
        save_batch(batch, path)
        back = load_batch(path)
        for name in ("theta", "gamma", "weights", "data"):
            a, b = getattr(batch, name), getattr(back, name)
            assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
        assert back.data.dtype == np.int32
        assert back.meta == json.loads(json.dumps(batch.meta))

    def test_reruns_are_byte_identical(self, tmp_path):
        for name in ("a.vbb", "b.vbb"):
            save_batch(make_sim_batch(ConjugateGaussian(), 700, seed=5, block_size=300), tmp_path / name)
        assert (tmp_path / "a.vbb").read_bytes() == (tmp_path / "b.vbb").read_bytes()
        assert (tmp_path / "a.vbb").read_bytes().startswith(MAGIC)

    def test_header_and_foreign_file(self, tmp_path):
        save_batch(make_sim_batch(ConjugateGaussian(), 10, seed=0), tmp_path / "b.vbb")
        header = read_batch_header(tmp_path / "b.vbb")
        assert [c["name"] for c in header["columns"]] == ["theta", "gamma", "weights", "data"]
        (tmp_path / "x.vbb").write_text("hello\n")
        with pytest.raises(FormatError):
            load_batch(tmp_path / "x.vbb")

    def test_csv_export(self, tmp_path):
        batch = make_sim_batch(ConjugateGaussian(3), 4, seed=0)
        export_batch_csv(batch, tmp_path / "b.csv", include_data=True)
        rows = list(csv.reader(open(tmp_path / "b.csv")))
        assert rows[0] == ["theta", "target_theta", "weight", "y0", "y1", "y2"]
        assert float(rows[1][3]) == batch.data[0, 0]

    def test_observed_formats(self, tmp_path):
        data = np.arange(12.0).reshape(2, 6)
        np.save(tmp_path / "obs.npy", data)
        np.savetxt(tmp_path / "obs.csv", data, delimiter=",")
        for name in ("obs.npy", "obs.csv"):
            assert load_observed(tmp_path / name, [2, 3]).shape == (2, 2, 3)
        with pytest.raises(FormatError, match="multiple"):
            load_observed(tmp_path / "obs.npy", [5])

    def test_config_hash_is_order_free(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            pipeline.resolve_config({**CONFIG, "epochz": 3})

    def test_unknown_target(self):
        with pytest.raises(ConfigError, match="unknown target"):
            pipeline.resolve_config({**CONFIG, "targets": {"sigma": {}}})

    def test_seed_override_changes_hash(self):
        a = pipeline.resolve_config(dict(CONFIG))
        b = pipeline.resolve_config(dict(CONFIG), seed_override=99)
        assert b["seed"] == 99 and a["config_hash"] != b["config_hash"]

    def test_common_prefix(self):
        variants = {
            "a": [{"stage": "least_squares"}, {"stage": "rank_to_unit"}],
            "b": [{"stage": "least_squares"}, {"stage": "pca", "n_components": 2}],
        }
        assert pipeline.common_prefix(variants) == [{"stage": "least_squares"}]


class TestCommands:
    def test_bundle_layout(self, experiment):
        _, out = experiment
        manifest = json.loads((out / "bundle" / "manifest.json").read_text())
        cells = manifest["targets"]["theta"]["cells"]
        assert set(cells) == {"default__16x8", "default__8"}
        best = manifest["targets"]["theta"]["best"]
        assert cells[best]["log_score"] == max(c["log_score"] for c in cells.values())
        for c in cells.values():
            assert (out / "bundle" / c["model_file"]).exists()

    def test_pipeline_is_deterministic(self, experiment, tmp_path):
        config, out = experiment
        again = tmp_path / "again"
        assert cli.main(["simulate", "--config", config, "--out", str(again)]) == 0
        assert cli.main(["train", "--config", config, "--out", str(again)]) == 0
        for rel in ("batches/train.vbb", "batches/val.vbb", "bundle/manifest.json"):
            assert (out / rel).read_bytes() == (again / rel).read_bytes()
        for f in (out / "bundle").glob("model_*.json"):
            assert f.read_bytes() == (again / "bundle" / f.name).read_bytes()

    def test_diagnose_passes_gate(self, experiment, capsys):
        config, out = experiment
        assert cli.main(["diagnose", "--config", config, "--out", str(out)]) == 0
        report = json.loads((out / "diagnostics" / "report.json").read_text())
        assert report[0]["ks_stat"] < 0.08
        assert (out / "diagnostics" / "pit_theta.csv").exists()

    def test_halved_sd_trips_gate(self, experiment, tmp_path):
        config, out = experiment
        bad = tmp_path / "bad"
        shutil.copytree(out, bad)
        manifest = json.loads((bad / "bundle" / "manifest.json").read_text())
        for cell in manifest["targets"]["theta"]["cells"].values():
            path = bad / "bundle" / cell["model_file"]
            model = json.loads(path.read_text())
            bias = model["network"]["biases"][-1]
            values = [float(x) for x in bias["data"].split()]
            # second raw output is log sd
            values[1] -= np.log(2.0)
            bias["data"] = " ".join(format(v, ".17g") for v in values)
            path.write_text(json.dumps(model))
        assert cli.main(["diagnose", "--config", config, "--out", str(bad), "--ks-gate", "0.05"]) == 1
        report = json.loads((bad / "diagnostics" / "report.json").read_text())
        assert report[0]["ks_stat"] > 0.05

    def test_infer_matches_analytic_posterior(self, experiment, tmp_path):
        config, out = experiment
        rng = np.random.default_rng(0)
        Y = rng.normal(0.3, 1.0, size=(20, 5))
        np.save(tmp_path / "obs.npy", Y)
        assert cli.main(["infer", "--config", config, "--out", str(out), "--observed", str(tmp_path / "obs.npy")]) == 0
        rows = list(csv.DictReader(open(out / "infer" / "posterior.csv")))
        assert len(rows) == 20
        mean, sd = ConjugateGaussian(5).analytic_posterior(Y)
        lo = np.array([float(r["lower_0.9"]) for r in rows])
        hi = np.array([float(r["upper_0.9"]) for r in rows])
        z = 1.6448536269514724
        assert np.mean(np.abs(lo - (mean - z * sd))) < 0.05
        assert np.mean(np.abs(hi - (mean + z * sd))) < 0.05

    def test_infer_on_training_record_equals_diagnostic_params(self, experiment, tmp_path):
        config, out = experiment
        val = load_batch(out / "batches" / "val.vbb")
        np.save(tmp_path / "rec.npy", val.data[:3])
        cfg = pipeline.load_config(config)
        pipeline.cmd_infer(cfg, out, tmp_path / "rec.npy")
        rows = list(csv.DictReader(open(out / "infer" / "posterior.csv")))
        bundle = pipeline.Bundle.load(out / "bundle", cfg)
        smap, post = pipeline.target_posterior(bundle, "theta")
        params = post.predict_params(smap.transform(val.inputs[:3]))
        np.testing.assert_array_equal([float(r["head_mean"]) for r in rows], params["mean"])

    def test_scenario_mode(self, experiment, capsys):
        config, out = experiment
        assert cli.main(["infer", "--config", config, "--out", str(out), "--scenario"]) == 0
        rows = list(csv.DictReader(open(out / "infer" / "scenario.csv")))
        assert rows[0]["target"] == "theta" and rows[0]["replicates"] == "200"
        assert 0.8 < float(rows[0]["coverage_0.9"]) <= 1.0

    def test_hash_guard(self, experiment, capsys):
        config, out = experiment
        assert cli.main(["train", "--config", config, "--out", str(out), "--seed-override", "5"]) == 2
        assert "different configuration" in capsys.readouterr().err

    def test_missing_batches_is_config_error(self, tmp_path, capsys):
        config = _write_config(tmp_path / "c.yaml")
        assert cli.main(["train", "--config", config, "--out", str(tmp_path / "nothing")]) == 2

    def test_empty_validation_is_config_error(self, experiment):
        config, out = experiment
        cfg = pipeline.load_config(config)
        val = load_batch(out / "batches" / "val.vbb")
        empty = type(val)(val.theta[:0], val.gamma[:0], val.weights[:0], val.data[:0], None, val.meta)
        with pytest.raises(ConfigError, match="empty"):
            pipeline.cmd_diagnose(cfg, out, val=empty)

    def test_invariance_check_small(self, tmp_path):
        config = _write_config(tmp_path / "inv.yaml", n_train=1000, n_val=300,
                               training={"theta": {"dist": "norm", "loc": 0.0, "scale": 1.5}})
        assert cli.main(["invariance-check", "--config", config, "--out", str(tmp_path / "inv")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "inv" / "invariance.csv")))
        assert rows[0]["target"] == "theta"
        assert float(rows[0]["mean_weight"]) == pytest.approx(1.0, abs=0.15)

    def test_invariance_needs_training_distribution(self, tmp_path):
        config = _write_config(tmp_path / "c.yaml")
        assert cli.main(["invariance-check", "--config", config, "--out", str(tmp_path / "o")]) == 2


def test_binary_targets_get_classification_metrics(tmp_path):
    config = _write_config(
        tmp_path / "sr.yaml", model={"name": "sparse_regression", "p": 3, "n": 20, "n_test": 1},
        n_train=600, n_val=200, block_size=300, arches=[[8]], train={"epochs": 2},
        summaries=[{"stage": "least_squares"}, {"stage": "rank_to_unit"}],
        targets={"include1": {"family": "bernoulli_logit"}, "sigma": {"family": "log_normal"}})
    out = tmp_path / "o"
    for cmd in ("simulate", "train"):
        assert cli.main([cmd, "--config", config, "--out", str(out)]) == 0
    cli.main(["diagnose", "--config", config, "--out", str(out), "--ks-gate", "1"])
    rows = list(csv.DictReader(open(out / "diagnostics" / "binary_metrics.csv")))
    assert [r["target"] for r in rows] == ["include1"]
    assert 0.0 <= float(rows[0]["ca"]) <= 1.0 and float(rows[0]["ce"]) > 0
