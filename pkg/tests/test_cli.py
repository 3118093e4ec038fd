"""End-to-end CLI pipeline at toy sizes, plus exit-code and manifest behavior."""

import json
import os

import numpy as np
import pytest

from torusflow.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the full chain once: dataset -> train -> sample -> estimate."""
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "data": str(root / "data.bin"),
        "ckpt": str(root / "model.ckpt"),
        "history": str(root / "history.csv"),
        "samples": str(root / "draws.bin"),
        "est": str(root / "est"),
    }
    rc = main(
        [
            "generate-dataset",
            "--system", "ipl",
            "--n", "4",
            "--chains", "2",
            "--equilibration", "50",
            "--production", "100",
            "--save-interval", "10",
            "--seed", "3",
            "--out", paths["data"],
        ]
    )
    assert rc == 0
    rc = main(
        [
            "train",
            "--data", paths["data"],
            "--out", paths["ckpt"],
            "--epochs", "2",
            "--batch-size", "16",
            "--micro-batch", "8",
            "--lr", "1e-3",
            "--depth", "1",
            "--width", "8",
            "--edge-dim", "8",
            "--seed", "0",
            "--history", paths["history"],
        ]
    )
    assert rc == 0
    rc = main(
        [
            "sample",
            "--checkpoint", paths["ckpt"],
            "--out", paths["samples"],
            "--n-samples", "8",
            "--chunk-size", "4",
            "--rtol", "1e-4",
            "--atol", "1e-4",
            "--seed", "1",
        ]
    )
    assert rc == 0
    rc = main(
        [
            "estimate",
            "--samples", paths["samples"],
            "--out", paths["est"],
            "--dr", "0.3",
            "--reference", paths["data"],
        ]
    )
    assert rc == 0
    return paths


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        for key in ("data", "ckpt", "history", "samples"):
            assert os.path.exists(pipeline[key]), key
        for key in ("data", "ckpt", "samples"):
            assert os.path.exists(pipeline[key] + ".manifest.json")
        for name in ("energy", "cv", "gr", "ess"):
            assert os.path.exists(f"{pipeline['est']}_{name}.csv")
            assert os.path.exists(f"{pipeline['est']}_{name}.svg")

    def test_dataset_contents(self, pipeline):
        from torusflow.configuration import read_dataset

        dataset = read_dataset(pipeline["data"])
        assert dataset.n_frames == 2 * 10
        assert dataset.system.n_particles == 4

    def test_history_csv(self, pipeline):
        lines = open(pipeline["history"]).read().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 3

    def test_sample_file(self, pipeline):
        from torusflow.ode_flow import read_samples

        system, samples, header = read_samples(pipeline["samples"])
        assert len(samples) == 8
        assert system.n_particles == 4
        assert header["seed"] == 1
        # Sample provenance pins the checkpoint it came from.
        ckpt_hash = json.load(open(pipeline["ckpt"] + ".manifest.json"))["outputs"][
            os.path.basename(pipeline["ckpt"])
        ]["sha256"]
        assert header["provenance"]["inputs"]["checkpoint"] == ckpt_hash

    def test_estimate_csv_shape(self, pipeline):
        rows = open(f"{pipeline['est']}_gr.csv").read().strip().splitlines()
        assert rows[0] == "r,g_direct,g_reweighted,g_reference"
        assert len(rows) > 2

    def test_manifest_hash_chain_verifies(self, pipeline, capsys):
        rc = main(["verify", "--manifest", pipeline["samples"] + ".manifest.json"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "manifest hash chain verified" in out

    def test_manifest_detects_tampering(self, pipeline, tmp_path, capsys):
        manifest_path = pipeline["data"] + ".manifest.json"
        blob = bytearray(open(pipeline["data"], "rb").read())
        blob[-1] ^= 0xFF
        tampered = tmp_path / "data.bin"
        tampered.write_bytes(bytes(blob))
        manifest = json.load(open(manifest_path))
        name = os.path.basename(pipeline["data"])
        manifest["outputs"][name]["path"] = str(tampered)
        twisted = tmp_path / "m.json"
        twisted.write_text(json.dumps(manifest))
        rc = main(["verify", "--manifest", str(twisted)])
        out = capsys.readouterr().out
        assert rc == 1
        assert "hash mismatch" in out

    def test_plot_from_csv(self, pipeline, tmp_path, capsys):
        out = tmp_path / "energy.svg"
        rc = main(
            [
                "plot",
                "--csv", f"{pipeline['est']}_energy.csv",
                "--out", str(out),
                "--title", "running mean",
                "--log-x",
            ]
        )
        assert rc == 0
        assert out.exists()
        assert "<svg" in out.read_text()


class TestExitCodes:
    def test_bad_thread_budget(self, capsys):
        rc = main(["--threads", "0", "verify", "--quick", "--suites", "geometry"])
        assert rc == 2
        assert "thread budget" in capsys.readouterr().err

    def test_bad_thread_env(self, monkeypatch, capsys):
        monkeypatch.setenv("TORUSFLOW_THREADS", "lots")
        rc = main(["verify", "--quick", "--suites", "geometry"])
        assert rc == 2
        assert "TORUSFLOW_THREADS" in capsys.readouterr().err

    def test_thread_budget_exported(self, monkeypatch):
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
            "VECLIB_MAXIMUM_THREADS",
        ):
            monkeypatch.delenv(var, raising=False)
        rc = main(["--threads", "2", "verify", "--quick", "--suites", "geometry"])
        assert rc == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"
        assert os.environ["OPENBLAS_NUM_THREADS"] == "2"

    def test_missing_input_is_runtime_error(self, tmp_path, capsys):
        rc = main(
            ["train", "--data", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "x")]
        )
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_domain_errors_exit_one(self, tmp_path, capsys):
        bad = tmp_path / "corrupt.bin"
        bad.write_bytes(b"not a dataset\n")
        rc = main(["train", "--data", str(bad), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_observable(self, tmp_path, capsys):
        rc = main(
            ["estimate", "--samples", str(tmp_path / "s.bin"), "--out", str(tmp_path / "e"),
             "--observables", "u,bogus"]
        )
        assert rc == 1
        assert "unknown observables" in capsys.readouterr().err

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2

    def test_verify_rejects_non_manifest(self, tmp_path, capsys):
        stray = tmp_path / "stray.json"
        stray.write_text('{"format": "other"}')
        rc = main(["verify", "--manifest", str(stray)])
        assert rc == 1
        assert "not a manifest" in capsys.readouterr().err


class TestSampleSystemResolution:
    def test_checkpoint_without_system_needs_data(self, pipeline, tmp_path, capsys):
        from torusflow.velocity_net import GnnConfig, TorusGnn, save_checkpoint

        from torusflow.configuration import ipl_system

        system = ipl_system(4)
        model = TorusGnn(GnnConfig(box_length=system.box_length))
        params = model.init_params(np.random.default_rng(0))
        bare = tmp_path / "bare.ckpt"
        save_checkpoint(str(bare), model.config, params)

        rc = main(
            ["sample", "--checkpoint", str(bare), "--out", str(tmp_path / "s.bin"),
             "--n-samples", "2", "--chunk-size", "2"]
        )
        assert rc == 1
        assert "pass --data" in capsys.readouterr().err

        rc = main(
            ["sample", "--checkpoint", str(bare), "--out", str(tmp_path / "s.bin"),
             "--n-samples", "2", "--chunk-size", "2", "--data", pipeline["data"]]
        )
        assert rc == 0

    def test_box_length_mismatch_rejected(self, pipeline, tmp_path, capsys):
        from torusflow.velocity_net import GnnConfig, TorusGnn, save_checkpoint

        model = TorusGnn(GnnConfig(box_length=1.0))
        params = model.init_params(np.random.default_rng(0))
        odd = tmp_path / "odd.ckpt"
        save_checkpoint(str(odd), model.config, params)
        rc = main(
            ["sample", "--checkpoint", str(odd), "--out", str(tmp_path / "s.bin"),
             "--n-samples", "2", "--data", pipeline["data"]]
        )
        assert rc == 1
        assert "does not match" in capsys.readouterr().err


class TestVerifySuites:
    def test_quick_suite_passes(self, capsys):
        rc = main(["verify", "--quick", "--suites", "geometry,group"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out
        assert "FAIL" not in out
