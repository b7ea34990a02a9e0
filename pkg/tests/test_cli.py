import numpy as np
import pytest

from ppgn import io
from ppgn.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Data files and quickly trained checkpoints produced through the CLI itself."""
    d = tmp_path_factory.mktemp("cli")
    data = ["--images", str(d / "train-images-idx3-ubyte"), "--labels", str(d / "train-labels-idx1-ubyte")]
    assert main(["prepare-data", "--out_dir", str(d)]) == 0
    assert main(["train-classifier", *data, "--epochs", "2", "--out", str(d / "c.ckpt")]) == 0
    assert main(["train-classifier", *data, "--epochs", "2", "--seed", "5", "--out", str(d / "h.ckpt")]) == 0
    assert main(["train-generator", *data, "--classifier", str(d / "c.ckpt"), "--epochs", "1",
                 "--out", str(d / "g.ckpt")]) == 0
    assert main(["train-dae", *data, "--space", "h", "--classifier", str(d / "c.ckpt"), "--epochs", "1",
                 "--out", str(d / "rh.ckpt")]) == 0
    assert main(["train-dae", *data, "--space", "x", "--epochs", "1", "--out", str(d / "rx.ckpt")]) == 0
    return d, data


def _models(d):
    return ["--classifier", str(d / "c.ckpt"), "--generator", str(d / "g.ckpt"), "--heldout", str(d / "h.ckpt"),
            "--dae_h", str(d / "rh.ckpt"), "--dae_x", str(d / "rx.ckpt")]


def _report(path):
    return io.parse_key_values(path.read_text())


class TestUsage:
    def test_no_arguments(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["sample", "--bogus", "1"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["paint"]) == 1

    def test_bad_variant(self):
        assert main(["sample", "--variant", "ppgn_z"]) == 1

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "sample" in capsys.readouterr().out

    def test_missing_classifier(self, tmp_path):
        assert main(["sample", "--target_class", "1", "--out_dir", str(tmp_path)]) == 1

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "run.cfg").write_text("temperature=3\n")
        assert main(["sample", "--config", str(tmp_path / "run.cfg")]) == 1

    def test_runtime_error(self, tmp_path):
        assert main(["sample", "--classifier", str(tmp_path / "missing.ckpt"), "--target_class", "1"]) == 2


class TestPrepareData:
    def test_idx_files(self, workdir):
        d, _ = workdir
        train = io.load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
        test = io.load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
        assert train.images.shape == (4000, 784) and test.images.shape == (1000, 784)
        assert set(np.unique(test.labels)) == set(range(10))


class TestTraining:
    def test_checkpoints_load(self, workdir):
        d, _ = workdir
        C, G = io.load_checkpoint(d / "c.ckpt"), io.load_checkpoint(d / "g.ckpt")
        assert C.in_dim == 784 and C.out_dim == 10 and G.in_dim == C.tap_dim("h") and G.out_dim == 784
        assert io.load_checkpoint(d / "rx.ckpt").meta["sigma"] == 0.2
        assert io.load_checkpoint(d / "rh.ckpt").meta["sigma"] > 0


class TestSample:
    @pytest.mark.parametrize("variant", ["noiseless_joint", "dgn_am", "ppgn_h", "joint_ppgn_h", "ppgn_x"])
    def test_every_variant(self, workdir, tmp_path, variant):
        d, data = workdir
        args = ["sample", "--variant", variant, "--target_class", "3", "--steps", "5", "--chains", "4",
                "--seed", "7", "--out_dir", str(tmp_path), *data, *_models(d)]
        assert main(args) == 0
        assert io.read_pgm(tmp_path / f"{variant}.pgm").shape == (28, 4 * 28 + 3)
        rep = _report(tmp_path / f"{variant}.report")
        assert rep["chains"] == "4" and rep["steps"] == "5"
        _, arrays = io.load_arrays(tmp_path / f"{variant}.samples")
        assert arrays["final"].shape == (4, 784) and (arrays["targets"] == 3).all()

    def test_default_step_sizes(self, workdir, tmp_path):
        d, data = workdir
        for variant, eps in (("noiseless_joint", ("1.00000e-05", "1.00000", "1.00000e-17")),
                             ("dgn_am", ("0.00000", "1.00000", "1.00000e-17"))):
            assert main(["sample", "--variant", variant, "--target_class", "3", "--steps", "2", "--chains", "2",
                         "--out_dir", str(tmp_path), *data, *_models(d)]) == 0
            rep = _report(tmp_path / f"{variant}.report")
            assert (rep["eps1"], rep["eps2"], rep["eps3"]) == eps

    def test_byte_identical_repeats(self, workdir, tmp_path):
        d, data = workdir
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert main(["sample", "--variant", "joint_ppgn_h", "--target_class", "3", "--steps", "20",
                         "--chains", "10", "--seed", "7", "--out_dir", str(out), *data, *_models(d)]) == 0
            outs.append(out)
        for name in ("joint_ppgn_h.pgm", "joint_ppgn_h.report", "joint_ppgn_h.samples"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_flags_override_config(self, workdir, tmp_path):
        d, data = workdir
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"variant=dgn_am\nsteps=3\nchains=2\ntarget_class=1\neps3=1e-3\nout_dir={tmp_path}\n")
        assert main(["sample", "--config", str(cfg), "--steps", "4", *data, *_models(d)]) == 0
        rep = _report(tmp_path / "dgn_am.report")
        assert rep["steps"] == "4" and rep["eps3"] == "0.00100000" and rep["chains"] == "2"

    def test_sweep_grid(self, workdir, tmp_path):
        d, data = workdir
        assert main(["sample", "--variant", "noiseless_joint", "--sweep", "eps3", "--target_class", "2",
                     "--steps", "2", "--chains", "2", "--out_dir", str(tmp_path), *data, *_models(d)]) == 0
        reports = sorted(p.name for p in tmp_path.glob("*.report"))
        assert len(reports) == 6 and "noiseless_joint_eps3_1e-17.report" in reports

    def test_hidden_unit_condition(self, workdir, tmp_path):
        d, data = workdir
        assert main(["sample", "--hidden_layer", "h1", "--hidden_unit", "5", "--steps", "3", "--chains", "2",
                     "--out_dir", str(tmp_path), *data, *_models(d)]) == 0
        assert main(["sample", "--hidden_layer", "h1", "--steps", "3", *data, *_models(d)]) == 1


class TestInpaintAndEval:
    def test_inpaint(self, workdir, tmp_path):
        d, data = workdir
        assert main(["inpaint", "--steps", "5", "--chains", "3", "--context_weight", "0.1",
                     "--out_dir", str(tmp_path), *data, *_models(d)]) == 0
        assert io.read_pgm(tmp_path / "inpaint.pgm").shape == (57, 3 * 28 + 2)
        assert _report(tmp_path / "inpaint.report")["context_weight"] == "0.100000"

    def test_eval(self, workdir, tmp_path):
        d, data = workdir
        assert main(["sample", "--target_class", "4", "--steps", "10", "--chains", "6", "--out_dir", str(tmp_path),
                     *data, *_models(d)]) == 0
        assert main(["eval", "--samples", str(tmp_path / "noiseless_joint.samples"), "--threshold", "0",
                     "--classifier", str(d / "c.ckpt"), "--heldout", str(d / "h.ckpt"), "--out_dir", str(tmp_path),
                     *data]) == 0
        rep = _report(tmp_path / "eval.report")
        assert rep["n_total"] == "6" and rep["n_kept"] == "6"
        assert 0.0 <= float(rep["quality"]) <= 1.0
        assert float(rep["diverse_class_percent"]) in (0.0, 100.0)
