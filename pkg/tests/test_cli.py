"""Command-line surface: subcommands, config merging, outputs, exit codes."""

import json

import numpy as np
import pytest

from metapc.cli import _parse_alphas, main


def run(args):
    return main(args)


class TestGenCorpus:
    def test_writes_sequences(self, tmp_path):
        out = tmp_path / "corpus.txt"
        assert run(["gen-corpus", "--T", "5", "--mode", "full",
                    "--out-file", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 26 * 2**4
        assert all(len(line) == 5 for line in lines)

    def test_sampled_mode(self, tmp_path):
        out = tmp_path / "corpus.txt"
        assert run(["gen-corpus", "--T", "6", "--mode", "40",
                    "--out-file", str(out), "--seed", "3"]) == 0
        assert len(out.read_text().splitlines()) == 40

    def test_bad_mode_is_user_error(self, tmp_path):
        assert run(["gen-corpus", "--mode", "soon",
                    "--out-file", str(tmp_path / "x.txt")]) == 1


TINY_TOY = [
    "train", "--task", "toy", "--M", "8", "--T", "5", "--n", "20",
    "--epochs", "2", "--batch-size", "4", "--inference-steps", "3",
    "--seed", "1",
]


class TestTrainCommand:
    def test_toy_run_writes_artifacts(self, tmp_path):
        out = tmp_path / "run"
        assert run(TINY_TOY + ["--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()
        assert (out / "checkpoint.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 1
        assert manifest["config"]["m"] == 8
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3  # header + 2 epochs

    def test_artifacts_refresh_every_epoch(self, tmp_path):
        out = tmp_path / "hook"
        assert run(TINY_TOY + ["--out", str(out)]) == 0
        ckpt = json.loads((out / "checkpoint.json").read_text())
        assert ckpt["epoch"] == 2  # written after the final epoch

    def test_manifest_reproduces_run(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert run(TINY_TOY + ["--out", str(out)]) == 0
        a = (outs[0] / "metrics.csv").read_bytes()
        b = (outs[1] / "metrics.csv").read_bytes()
        assert a == b

    def test_vanilla_engine(self, tmp_path):
        out = tmp_path / "v"
        assert run(TINY_TOY + ["--engine", "vanilla", "--out", str(out)]) == 0
        ckpt = json.loads((out / "checkpoint.json").read_text())
        assert ckpt["kind"] == "concrete"

    def test_plot_flag_renders_figures(self, tmp_path):
        out = tmp_path / "p"
        assert run(TINY_TOY + ["--out", str(out), "--plot"]) == 0
        assert (out / "training_curves.png").exists()
        assert (out / "layer_stats.png").exists()
        assert (out / "hyperparameters.png").exists()

    def test_text_task_on_bundled_corpus(self, tmp_path):
        out = tmp_path / "t"
        code = run([
            "train", "--task", "text", "--n", "20", "--epochs", "1",
            "--batch-size", "16", "--inference-steps", "2", "--limit", "60",
            "--seed", "2", "--out", str(out),
        ])
        assert code == 0
        assert (out / "metrics.csv").exists()

    def test_missing_corpus_is_user_error(self, tmp_path):
        code = run(["train", "--task", "text", "--corpus",
                    str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_missing_mnist_paths_is_user_error(self, tmp_path):
        code = run(["train", "--task", "mnist", "--out", str(tmp_path / "o")])
        assert code == 1

    def test_config_file_merging(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 1, "m": 6, "t": 4, "n": 10,
                                   "batch_size": 3, "n_steps": 2}))
        out = tmp_path / "c"
        code = run(["train", "--task", "toy", "--config", str(cfg),
                    "--epochs", "2", "--seed", "0", "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 2  # flag beats file
        assert manifest["config"]["m"] == 6       # file beats default

    def test_seed_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MPL_SEED", "99")
        out = tmp_path / "env"
        assert run(TINY_TOY[:-2] + ["--out", str(out)]) == 0  # drop --seed 1
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 99


class TestEvalAndSampling:
    @pytest.fixture()
    def toy_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        assert run(TINY_TOY + ["--out", str(out)]) == 0
        return out / "checkpoint.json"

    def test_eval_prints_ratio(self, toy_checkpoint, capsys):
        assert run(["eval", "--task", "toy", "--checkpoint", str(toy_checkpoint),
                    "--T", "5", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert "correct_letter_ratio" in out

    def test_sample_text_lists_sequences(self, toy_checkpoint, capsys):
        assert run(["sample-text", "--checkpoint", str(toy_checkpoint),
                    "--length", "7", "--starts", "abc", "--seed", "4"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        assert len(lines) == 3
        assert all("ratio=" in l for l in lines)
        assert lines[0].startswith("a")

    def test_export_stats_histograms(self, toy_checkpoint, tmp_path):
        out = tmp_path / "stats"
        assert run(["export-stats", "--checkpoint", str(toy_checkpoint),
                    "--out", str(out)]) == 0
        for layer in ("in", "rec", "out"):
            for param in ("m", "pi", "xi"):
                path = out / f"hist_{layer}_{param}.csv"
                assert path.exists()
                lines = path.read_text().splitlines()
                assert lines[0].startswith("# edges:")
                assert lines[1] == "bin_lo,bin_hi,count"
                assert len(lines) == 52
                counts = [int(l.split(",")[2]) for l in lines[2:]]
                assert sum(counts) == 20 * 26 if layer == "in" else True

    def test_export_stats_untrained_pi_concentrated(self, tmp_path):
        from metapc.data import save_checkpoint
        from metapc.sas import init_ensemble

        ens = init_ensemble(4, 10, 4, rng=np.random.default_rng(1))
        ckpt = tmp_path / "fresh.json"
        save_checkpoint(ens, None, ckpt)
        out = tmp_path / "stats"
        assert run(["export-stats", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        lines = (out / "hist_rec_pi.csv").read_text().splitlines()[2:]
        counts = [int(l.split(",")[2]) for l in lines]
        # every entry still sits at the init value, i.e. one occupied bin
        assert max(counts) == 100
        assert sum(1 for c in counts if c > 0) == 1

    def test_export_stats_layer_means(self, toy_checkpoint, tmp_path):
        metrics = toy_checkpoint.parent / "metrics.csv"
        out = tmp_path / "stats2"
        assert run(["export-stats", "--checkpoint", str(toy_checkpoint),
                    "--metrics", str(metrics), "--out", str(out)]) == 0
        header = (out / "layer_means.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,mean_abs_m_in")

    def test_missing_checkpoint_is_user_error(self, tmp_path):
        assert run(["eval", "--task", "toy",
                    "--checkpoint", str(tmp_path / "nope.json")]) == 1


class TestSweepCommand:
    def test_tiny_sweep(self, tmp_path):
        out = tmp_path / "sweep"
        code = run([
            "sweep-alpha", "--alphas", "0.1,0.2", "--runs", "2", "--n", "20",
            "--T", "4", "--epochs", "1", "--batch-size", "4",
            "--inference-steps", "2", "--seed", "5", "--jobs", "1",
            "--out", str(out),
        ])
        assert code == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "alpha,M,run,ratio"
        assert len(lines) == 5

    def test_unfittable_exponent_degrades_to_warning(self, tmp_path, capsys):
        out = tmp_path / "sweep2"
        code = run([
            "sweep-alpha", "--alphas", "0.1,0.2", "--runs", "1", "--n", "20",
            "--T", "4", "--epochs", "1", "--batch-size", "4",
            "--inference-steps", "2", "--seed", "5", "--jobs", "1",
            "--alpha-c", "0.02", "--plot", "--out", str(out),
        ])
        assert code == 0
        assert "exponent fit skipped" in capsys.readouterr().err
        assert (out / "sweep.csv").exists()
        assert (out / "sweep.png").exists()
        assert not (out / "exponent.txt").exists()

    def test_alpha_range_parsing(self):
        assert _parse_alphas("0.005:0.02:0.005") == pytest.approx(
            [0.005, 0.01, 0.015, 0.02]
        )
        assert _parse_alphas("0.1,0.3") == [0.1, 0.3]
        from metapc.cli import UserError

        with pytest.raises(UserError):
            _parse_alphas("1:2")


class TestExitCodes:
    def test_unknown_flag(self):
        assert run(["train", "--task", "toy", "--bogus"]) == 1

    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == 1

    def test_help_exits_zero(self):
        assert run(["--help"]) == 0

    def test_version_exits_zero(self):
        assert run(["--version"]) == 0
