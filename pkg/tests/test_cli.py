import csv

import numpy as np
import pytest

from sgplvm.main import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from sgplvm.models.matrix_file import MatrixFile
from sgplvm.repositories import checkpoints, matrix_files
from sgplvm.services.training_service import TRACE_COLUMNS

CONFIG = """
# small synthetic image problem
synth.n_train = 6
synth.n_test = 2
synth.spatial_shape = 3, 4
synth.seed = 1
layout.spatial_shape = 3, 4
model.d_xi = 2
model.m_xi = 4
model.beta_init = 20
train.max_iters = 5
train.fixed_beta_iters = 2
infer.max_iters = 5
infer.restarts = 1
infer.n_mog = 3
"""


def _rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.cfg").write_text(CONFIG)
    return tmp_path


@pytest.fixture
def trained(workdir):
    cfg = str(workdir / "run.cfg")
    assert main(["synth", "--config", cfg, "--out-dir", str(workdir), "--format", "csv"]) == EXIT_OK
    assert main([
        "train", "--data", str(workdir / "train.csv"), "--config", cfg, "--out", str(workdir / "model.bin"),
    ]) == EXIT_OK
    return workdir


class TestSynth:
    def test_writes_dataset_and_config(self, workdir):
        cfg = str(workdir / "run.cfg")
        assert main(["synth", "--config", cfg, "--out-dir", str(workdir / "data")]) == EXIT_OK
        for name in ("train.bin", "test.bin", "mask.bin", "latents.bin", "config.txt"):
            assert (workdir / "data" / name).exists()
        assert matrix_files.load(workdir / "data" / "train.bin")["Y"].shape == (6 * 12, 1)
        assert matrix_files.load(workdir / "data" / "mask.bin").first().shape == (2, 12)
        assert "layout.spatial_shape = 3, 4" in (workdir / "data" / "config.txt").read_text()


class TestWorkflow:
    def test_train_writes_checkpoint_and_trace(self, trained):
        checkpoint = checkpoints.load(trained / "model.bin")
        assert checkpoint.model.is_trained
        assert checkpoint.model.grid.n_xi == 6
        rows = _rows(trained / "model.bin.trace.csv")
        assert rows[0] == list(TRACE_COLUMNS)
        assert len(rows) > 1

    def test_resume(self, trained):
        cfg = str(trained / "run.cfg")
        assert main([
            "train", "--data", str(trained / "train.csv"), "--config", cfg,
            "--resume", str(trained / "model.bin"), "--out", str(trained / "again.bin"),
        ]) == EXIT_OK
        assert checkpoints.load(trained / "again.bin").model.is_trained

    def test_resume_rejects_other_data(self, trained):
        data = matrix_files.load(trained / "train.csv")
        matrix_files.save(trained / "other.csv", MatrixFile({"Y": 2.0 * data["Y"]}))
        assert main([
            "train", "--data", str(trained / "other.csv"), "--config", str(trained / "run.cfg"),
            "--resume", str(trained / "model.bin"), "--out", str(trained / "again.bin"),
        ]) == EXIT_DATA
        assert not (trained / "again.bin").exists()

    def test_export_latents(self, trained):
        out = trained / "latents_out.csv"
        assert main(["export-latents", "--ckpt", str(trained / "model.bin"), "--out", str(out)]) == EXIT_OK
        latents = matrix_files.load(out)
        assert latents["mean"].shape == (6, 2)
        assert np.all(latents["variance"] > 0)
        assert latents["inverse_lengthscales"].shape == (1, 2)

    def test_infer(self, trained):
        cfg = str(trained / "run.cfg")
        out = trained / "infer.csv"
        assert main([
            "infer", "--ckpt", str(trained / "model.bin"), "--test", str(trained / "test.csv"),
            "--mask", str(trained / "mask.csv"), "--config", cfg, "--out", str(out),
        ]) == EXIT_OK
        result = matrix_files.load(out)
        assert result["mean"].shape == (2, 2)
        assert result["bound"].shape == (2, 1)

    def test_impute_then_eval(self, trained):
        cfg = str(trained / "run.cfg")
        imputed, metrics, evaluated = trained / "imputed.csv", trained / "metrics.csv", trained / "eval.csv"
        assert main([
            "--threads", "2", "impute", "--ckpt", str(trained / "model.bin"), "--test", str(trained / "test.csv"),
            "--mask", str(trained / "mask.csv"), "--config", cfg, "--out", str(imputed), "--metrics", str(metrics),
        ]) == EXIT_OK

        filled = matrix_files.load(imputed)
        truth = matrix_files.load(trained / "test.csv")["Y"]
        observed = matrix_files.load(trained / "mask.csv").first().reshape(-1) != 0
        assert filled["Y"].shape == truth.shape
        np.testing.assert_allclose(filled["Y"][observed], truth[observed], rtol=1e-10, atol=1e-10)
        np.testing.assert_array_equal(filled["variance"][observed], 0.0)
        assert np.all(filled["variance"][~observed] >= 0)

        report = _rows(metrics)
        assert report[0] == ["case", "rmse", "mnlp"]
        assert [r[0] for r in report[1:3]] == ["0", "1"]

        assert main([
            "eval", "--pred", str(imputed), "--truth", str(trained / "test.csv"),
            "--mask", str(trained / "mask.csv"), "--out", str(evaluated),
        ]) == EXIT_OK
        rows = _rows(evaluated)
        # same RMSE over the missing values as the impute report
        np.testing.assert_allclose(float(rows[1][1]), float(report[1][1]), rtol=1e-9)

    def test_predict_from_exported_latents(self, trained):
        latents, out = trained / "latents_out.bin", trained / "pred.bin"
        main(["export-latents", "--ckpt", str(trained / "model.bin"), "--out", str(latents)])
        assert main([
            "predict", "--ckpt", str(trained / "model.bin"), "--latents", str(latents),
            "--n-mog", "2", "--out", str(out),
        ]) == EXIT_OK
        pred = matrix_files.load(out)
        assert pred["mean"].shape == (6 * 12, 1)
        assert np.all(pred["variance"] >= 0)

    def test_predict_upsampled_at_point_latents(self, trained):
        point, out = trained / "latents.csv", trained / "up.csv"
        assert main([
            "predict", "--ckpt", str(trained / "model.bin"), "--latents", str(point),
            "--spatial-scale", "2", "--out", str(out),
        ]) == EXIT_OK
        pred = matrix_files.load(out)
        assert pred["mean"].shape[0] == 8 * 6 * 8
        assert pred["Xs0"].shape == (6, 1)


class TestExitCodes:
    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == EXIT_USAGE

    def test_bad_thread_count(self, workdir):
        assert main(["--threads", "0", "synth", "--out-dir", str(workdir)]) == EXIT_USAGE

    @pytest.mark.parametrize("text", ["model.d_xi = 0\n", "model.unknown = 3\n", "no equals sign\n"])
    def test_bad_config(self, workdir, text):
        (workdir / "bad.cfg").write_text(text)
        assert main(["synth", "--config", str(workdir / "bad.cfg"), "--out-dir", str(workdir)]) == EXIT_USAGE

    def test_missing_data_file(self, workdir):
        assert main([
            "train", "--data", str(workdir / "absent.csv"), "--config", str(workdir / "run.cfg"),
            "--out", str(workdir / "m.bin"),
        ]) == EXIT_DATA

    def test_data_that_does_not_fit_layout(self, workdir):
        (workdir / "odd.csv").write_text("1,2,3,4,5\n")
        assert main([
            "train", "--data", str(workdir / "odd.csv"), "--config", str(workdir / "run.cfg"),
            "--out", str(workdir / "m.bin"),
        ]) == EXIT_DATA
        assert not (workdir / "m.bin").exists()

    def test_eval_shape_mismatch(self, workdir):
        matrix_files.save(workdir / "p.csv", MatrixFile({"Y": np.array([[1.0], [2.0]])}))
        matrix_files.save(workdir / "t.csv", MatrixFile({"Y": np.array([[1.0], [2.0], [3.0]])}))
        assert main([
            "eval", "--pred", str(workdir / "p.csv"), "--truth", str(workdir / "t.csv"), "--out", str(workdir / "e.csv"),
        ]) == EXIT_DATA


class TestEval:
    def test_perfect_prediction_with_unit_variance(self, workdir):
        truth = np.arange(8, dtype=float).reshape(8, 1)
        matrix_files.save(workdir / "p.bin", MatrixFile({"mean": truth, "variance": np.ones_like(truth)}))
        matrix_files.save(workdir / "t.bin", MatrixFile({"Y": truth}))
        assert main([
            "eval", "--pred", str(workdir / "p.bin"), "--truth", str(workdir / "t.bin"),
            "--n-cases", "2", "--out", str(workdir / "e.csv"),
        ]) == EXIT_OK
        rows = _rows(workdir / "e.csv")
        assert float(rows[1][1]) == 0.0
        np.testing.assert_allclose(float(rows[1][2]), 0.5 * np.log(2 * np.pi), rtol=1e-12)

    def test_observed_points_do_not_count(self, workdir):
        truth = np.zeros((4, 1))
        pred = np.array([[1e6], [0.5], [-1e6], [0.5]])
        matrix_files.save(workdir / "p.bin", MatrixFile({"mean": pred, "variance": np.ones_like(pred)}))
        matrix_files.save(workdir / "t.bin", MatrixFile({"Y": truth}))
        matrix_files.save(workdir / "m.bin", MatrixFile({"mask": np.array([[1.0, 0.0, 1.0, 0.0]])}))
        assert main([
            "eval", "--pred", str(workdir / "p.bin"), "--truth", str(workdir / "t.bin"),
            "--mask", str(workdir / "m.bin"), "--out", str(workdir / "e.csv"),
        ]) == EXIT_OK
        assert float(_rows(workdir / "e.csv")[1][1]) == pytest.approx(0.5)
