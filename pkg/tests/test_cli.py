import json

import numpy as np
import pytest

from biasreid.cli import build_parser, main
from biasreid.evaluation import PROBE_CONFIG_KEYS
from biasreid.presets import GEN_CONFIG_KEYS
from biasreid.trainer import BRANCH_CONFIG_KEYS


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def small_gen_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "gen.cfg"
    path.write_text(
        "n_ids = 10\n"
        "samples_per_id = 6\n"
        "d_id = 6\n"
        "d_in = 8\n"
        "sigma = 0.1\n"
        "channels = pose:2:4:1.0,cam:2:4:0.5\n"
        "eval_fraction = 0.5\n"
        "feature_scale = 0.05\n"
    )
    return path


@pytest.fixture(scope="module")
def small_branch_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "branch.cfg"
    path.write_text(
        "bias_channel = pose\n"
        "p = 3\n"
        "k = 2\n"
        "epochs = 3\n"
        "rate = 0.005\n"
        "hidden = 8\n"
        "d_emb = 4\n"
        "margin_bias = 1.0\n"
    )
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, small_gen_cfg, small_branch_cfg):
    """gen -> train (reduce+enhance) -> embed -> eval, all through the CLI."""
    root = tmp_path_factory.mktemp("pipe")
    gen_dir = root / "gen"
    assert run(["gen", "--config", str(small_gen_cfg), "--out", str(gen_dir), "--seed", "7"]) == 0
    data = gen_dir / "dataset.csv"

    branch_dirs = {}
    for mode in ("reduce", "enhance"):
        out = root / f"train_{mode}"
        code = run([
            "train", "--data", str(data), "--config", str(small_branch_cfg),
            "--mode", mode, "--seed", "3", "--out", str(out),
        ])
        assert code == 0
        branch_dirs[mode] = out

    emb_dir = root / "emb"
    code = run([
        "embed",
        str(branch_dirs["reduce"] / "checkpoint.npz"),
        str(branch_dirs["enhance"] / "checkpoint.npz"),
        "--data", str(data), "--out", str(emb_dir),
    ])
    assert code == 0

    eval_dir = root / "eval"
    code = run(["eval", "--data", str(emb_dir / "embeddings.csv"), "--out", str(eval_dir)])
    assert code == 0
    return root, data, emb_dir, eval_dir


class TestPipeline:
    def test_end_to_end_report_populated(self, pipeline):
        _, _, _, eval_dir = pipeline
        report = json.loads((eval_dir / "report.json").read_text())
        assert 0.0 <= report["rank1"] <= 1.0
        assert 0.0 <= report["map"] <= 1.0
        assert set(report["channels"]) == {"pose", "cam"}
        assert (eval_dir / "curves_pose.csv").exists()
        assert (eval_dir / "metrics.csv").exists()

    def test_every_command_writes_manifest(self, pipeline):
        root, _, emb_dir, eval_dir = pipeline
        for sub in ("gen", "train_reduce", "emb", "eval"):
            manifest = json.loads((root / sub / "manifest.json").read_text())
            assert manifest["toolkit_version"]
            for out_file in manifest["outputs"]:
                assert (root / sub / out_file.split("/")[-1]).exists()

    def test_embed_concatenates_branches(self, pipeline):
        _, _, emb_dir, _ = pipeline
        header = (emb_dir / "embeddings.csv").read_text().splitlines()[0]
        assert header.split(",")[-1] == "e7"  # 2 branches x d_emb 4

    def test_nobias_eval_zeroes_same_channel_negatives(self, pipeline, tmp_path):
        _, _, emb_dir, _ = pipeline
        out = tmp_path / "nobias"
        code = run([
            "eval", "--data", str(emb_dir / "embeddings.csv"),
            "--protocol", "nobias", "--channel", "pose", "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["protocol"] == "nobias"
        assert all(v == 0.0 for v in report["channels"]["pose"]["p_neg"])

    def test_probe_and_stats_commands(self, pipeline, tmp_path):
        _, _, emb_dir, _ = pipeline
        probe_dir = tmp_path / "probe"
        code = run([
            "probe", "--data", str(emb_dir / "embeddings.csv"),
            "--channel", "pose", "--seed", "1", "--out", str(probe_dir),
        ])
        assert code == 0
        probe = json.loads((probe_dir / "probe.json").read_text())
        assert 0.0 <= probe["accuracy"] <= 1.0

        stats_dir = tmp_path / "stats"
        code = run([
            "stats", "--data", str(emb_dir / "embeddings.csv"),
            "--channel", "pose", "--out", str(stats_dir),
        ])
        assert code == 0
        nauc = json.loads((stats_dir / "nauc.json").read_text())
        assert 0.0 <= nauc["nauc10_neg"] <= 1.0
        lines = (stats_dir / "curves_pose.csv").read_text().splitlines()
        assert lines[0] == "rank,p_neg,p_pos"

    def test_replay_is_byte_identical(self, pipeline, small_gen_cfg, tmp_path):
        _, data, _, _ = pipeline
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["gen", "--config", str(small_gen_cfg), "--out", str(out), "--seed", "7"]) == 0
        assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
        assert (a / "dataset.csv").read_bytes() == data.read_bytes()


class TestSweep:
    def test_sweep_table_echoes_lambdas(self, pipeline, small_branch_cfg, tmp_path, capsys):
        _, data, _, _ = pipeline
        out = tmp_path / "sweep"
        code = run([
            "sweep", "--data", str(data), "--config", str(small_branch_cfg),
            "--mode", "reduce", "--lambdas", "0.005,0.01,0.05,0.1",
            "--seed", "0", "--out", str(out),
        ])
        assert code == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "lambda_db,rank1,map,probe_acc,nauc10_neg"
        assert len(lines) == 5
        assert [float(l.split(",")[0]) for l in lines[1:]] == [0.005, 0.01, 0.05, 0.1]


class TestErrors:
    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n_idz = 10\n")
        code = run(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and "n_idz" in err and "\n" == err[-1]

    def test_missing_data_file(self, tmp_path, capsys):
        code = run(["eval", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
        assert code != 0

    def test_unknown_preset(self, tmp_path, capsys):
        code = run(["gen", "--preset", "nopreset", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "unknown preset" in capsys.readouterr().err

    def test_nobias_without_channel(self, pipeline, tmp_path, capsys):
        _, _, emb_dir, _ = pipeline
        code = run([
            "eval", "--data", str(emb_dir / "embeddings.csv"),
            "--protocol", "nobias", "--out", str(tmp_path / "o"),
        ])
        assert code == 2
        assert "channel" in capsys.readouterr().err


class TestHelp:
    @pytest.mark.parametrize(
        "cmd,keys",
        [("gen", GEN_CONFIG_KEYS), ("train", BRANCH_CONFIG_KEYS), ("probe", PROBE_CONFIG_KEYS)],
    )
    def test_help_enumerates_every_config_key(self, cmd, keys, capsys):
        parser = build_parser()
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        text = capsys.readouterr().out
        for key in keys:
            assert key in text

    def test_preset_gen_runs(self, tmp_path):
        # presets are full-size; just check pose2 generates quickly
        out = tmp_path / "p"
        assert run(["gen", "--preset", "pose2", "--out", str(out), "--seed", "0"]) == 0
        header = (out / "dataset.csv").read_text().splitlines()[0]
        assert header.startswith("id,camera,split,pose,cam,f0")
