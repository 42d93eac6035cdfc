import json
from pathlib import Path

import numpy as np
import pytest

from csgpfa.cli import main
from csgpfa.state import load_checkpoint

PRESET = Path(__file__).resolve().parents[1] / "configs" / "paper_synthetic.json"
SMALL = {"M": 3, "N": 4, "T": 15, "D_true": 1, "n_trials": 6, "time_lengthscales": [3.0],
         "condition_lengthscales": [0.5], "seed": 0}


@pytest.fixture
def spec(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def fitted(tmp_path, spec):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(spec), "--out", str(data)]) == 0
    out = tmp_path / "fit"
    argv = ["fit", "--data", str(data), "--latents", "2", "--max-iters", "8", "--train-trials", "4",
            "--threads", "1", "--out", str(out)]
    assert main(argv) == 0
    return data, out


class TestGenerate:
    def test_paper_preset_shape(self, tmp_path):
        assert main(["generate", "--config", str(PRESET), "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "counts.csv").read_text().splitlines()
        assert len(rows) == 1 + 10 * 50 * 20 * 100
        assert len((tmp_path / "conditions.csv").read_text().splitlines()) == 1 + 10

    def test_seed_reproducible(self, tmp_path, spec):
        for name in ("a", "b"):
            assert main(["generate", "--config", str(spec), "--seed", "1", "--out", str(tmp_path / name)]) == 0
        for f in ("counts.csv", "conditions.csv", "truth.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_missing_config(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_bad_config(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"M": 3, "neurons": 4}))
        assert main(["generate", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path)]) == 2

    def test_missing_flag(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path)]) == 2


class TestFit:
    def test_artifacts(self, fitted):
        _, out = fitted
        for f in ("checkpoint.json", "fit_report.json", "monitor.csv", "train_counts.csv", "test_counts.csv",
                  "run.json"):
            assert (out / f).exists(), f
        report = json.loads((out / "fit_report.json").read_text())
        assert report["iterations_run"] == 8

    def test_missing_data(self, tmp_path):
        assert main(["fit", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2

    def test_resume_matches_uninterrupted(self, tmp_path, spec):
        data = tmp_path / "data"
        main(["generate", "--config", str(spec), "--out", str(data)])
        common = ["--data", str(data), "--latents", "2", "--threads", "1"]
        assert main(["fit", *common, "--max-iters", "12", "--out", str(tmp_path / "full")]) == 0
        assert main(["fit", *common, "--max-iters", "5", "--checkpoint-every", "5",
                     "--out", str(tmp_path / "part")]) == 0
        assert main(["fit", "--resume", str(tmp_path / "part" / "checkpoint.json"), "--max-iters", "12",
                     "--threads", "1", "--out", str(tmp_path / "part")]) == 0
        full = json.loads((tmp_path / "full" / "fit_report.json").read_text())["monitor"]
        part = json.loads((tmp_path / "part" / "fit_report.json").read_text())["monitor"]
        assert part[-1] == pytest.approx(full[-1], abs=1e-10)


class TestPredict:
    def test_training_conditions(self, fitted, tmp_path):
        data, out = fitted
        dest = tmp_path / "rates.csv"
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"),
                     "--conditions", str(data / "conditions.csv"), "--out", str(dest),
                     "--weights-out", str(tmp_path / "w.json"), "--include-cov"]) == 0
        from csgpfa.evaluation import fitted_rates
        state, *_ = load_checkpoint(out / "checkpoint.json")
        rates = np.loadtxt(dest, delimiter=",", skiprows=1)[:, 3].reshape(state.M, state.N, state.T)
        np.testing.assert_allclose(rates, fitted_rates(state), rtol=1e-8)
        weights = json.loads((tmp_path / "w.json").read_text())
        assert len(weights["neurons"]) == state.N and "cov" in weights["neurons"][0]

    def test_far_away_baseline(self, fitted, tmp_path):
        _, out = fitted
        (tmp_path / "far.csv").write_text("condition,coord_0\n0,1000.0\n")
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"),
                     "--conditions", str(tmp_path / "far.csv"), "--out", str(tmp_path / "r.csv")]) == 0
        state, *_ = load_checkpoint(out / "checkpoint.json")
        rates = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=1)[:, 3].reshape(state.N, state.T)
        base = state.r_mean * np.exp(state.beta_mean)
        np.testing.assert_allclose(rates, np.broadcast_to(base[:, None], rates.shape), rtol=1e-10)

    def test_dimension_mismatch(self, fitted, tmp_path):
        _, out = fitted
        (tmp_path / "c.csv").write_text("condition,coord_0,coord_1\n0,0.0,1.0\n")
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"),
                     "--conditions", str(tmp_path / "c.csv"), "--out", str(tmp_path / "r.csv")]) == 2


class TestEval:
    def test_with_truth(self, fitted):
        _, out = fitted
        assert main(["eval", "--run", str(out)]) == 0
        values = json.loads((out / "metrics.json").read_text())
        assert {"train_loglik", "test_loglik", "mae", "retained_dims"} <= set(values)
        assert (out / "peak_rates.csv").read_text().startswith("condition,neuron,peak_bin,peak_rate")

    def test_without_truth(self, fitted):
        data, out = fitted
        (data / "truth.json").unlink()
        assert main(["eval", "--run", str(out)]) == 0
        values = json.loads((out / "metrics.json").read_text())
        assert "mae" not in values and "test_loglik" in values

    def test_malformed_checkpoint(self, fitted):
        _, out = fitted
        (out / "checkpoint.json").write_text("{not json")
        assert main(["eval", "--run", str(out)]) == 2

    def test_truncated_checkpoint(self, fitted):
        _, out = fitted
        payload = json.loads((out / "checkpoint.json").read_text())
        payload.pop("state")
        (out / "checkpoint.json").write_text(json.dumps(payload))
        assert main(["eval", "--run", str(out)]) == 2
