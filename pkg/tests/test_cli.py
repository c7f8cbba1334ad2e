import glob
import os

import pytest

from anchordet.cli import main
from anchordet.config import RunConfig
from anchordet.scene import load_scene

TINY = [
    "--set", "extent=-20,20,-20,20",
    "--set", "cell_size=5",
    "--set", "d=16",
    "--set", "heads=2",
    "--set", "k_layers=2",
    "--set", "m_queries=8",
    "--set", "epochs_stage1=2",
    "--set", "epochs_aam=2",
    "--set", "epochs_stage2=2",
    "--set", "batch_size=5",
    "--set", "clutter_points=60",
    "--set", "surface_density=3",
    "--set", "objects_max=2",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("run")
    train_dir, eval_dir = str(root / "train"), str(root / "eval")
    out = str(root / "out")
    assert main(["gen-data", "--out", train_dir, "--count", "8", *TINY]) == 0
    assert main(["gen-data", "--out", eval_dir, "--count", "4", "--seed", "100",
                 *TINY]) == 0
    assert main(["train", "--out", out, "--data", train_dir, *TINY]) == 0
    stage1 = os.path.join(out, "checkpoints", "stage1.ckpt")
    assert main(["train-aam", "--out", out, "--data", train_dir,
                 "--checkpoint", stage1, *TINY]) == 0
    aam = os.path.join(out, "checkpoints", "aam.ckpt")
    assert main(["train", "--out", out, "--data", train_dir, "--refine", "1",
                 "--init-checkpoint", stage1, "--aam-checkpoint", aam,
                 *TINY]) == 0
    stage2 = os.path.join(out, "checkpoints", "stage2.ckpt")
    return {"train": train_dir, "eval": eval_dir, "out": out,
            "stage1": stage1, "aam": aam, "stage2": stage2}


class TestGenData:
    def test_scenes_reload(self, pipeline):
        files = sorted(glob.glob(os.path.join(pipeline["train"], "scene_*.txt")))
        assert len(files) == 8
        for f in files:
            scene = load_scene(f)
            assert len(scene.boxes) >= 1

    def test_config_echo_round_trips(self, pipeline):
        echo = os.path.join(pipeline["train"], "config.echo")
        assert os.path.exists(echo)
        reparsed = RunConfig.from_sources("desk", echo, None)
        original = RunConfig.from_sources(
            "desk", None,
            dict(TINY[i + 1].split("=", 1) for i in range(0, len(TINY), 2)),
        )
        assert reparsed.values == original.values

    def test_seed_changes_scenes(self, pipeline):
        a = open(os.path.join(pipeline["train"], "scene_00000.txt")).read()
        b = open(os.path.join(pipeline["eval"], "scene_00000.txt")).read()
        assert a != b


class TestErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path), "--count", "1",
                   "--set", "bogus_key=1"])
        assert rc == 1
        assert "bogus_key" in capsys.readouterr().err

    def test_bad_set_syntax(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path), "--count", "1",
                   "--set", "novalue"])
        assert rc == 1
        assert "KEY=VALUE" in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path), "--data",
                   str(tmp_path / "nowhere"), *TINY])
        assert rc == 1

    def test_refine_without_checkpoints(self, pipeline, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path), "--data", pipeline["train"],
                   "--refine", "1", *TINY])
        assert rc == 2

    def test_refine_layer_out_of_range(self, pipeline, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path), "--data", pipeline["train"],
                   "--refine", "9", "--init-checkpoint", pipeline["stage1"],
                   "--aam-checkpoint", pipeline["aam"], *TINY])
        assert rc == 1


class TestEval:
    def test_metrics_csv_with_nms_row(self, pipeline, tmp_path):
        out = str(tmp_path)
        rc = main(["eval", "--out", out, "--data", pipeline["eval"],
                   "--checkpoint", pipeline["stage2"], "--nms", "0.2", *TINY])
        assert rc == 0
        lines = open(os.path.join(out, "reports", "metrics.csv")).read().splitlines()
        assert lines[0] == "method,AP,ATE,ASE,AOE"
        assert lines[1].startswith("no_nms,")
        assert lines[2].startswith("nms_0.2,")
        assert len(lines) == 3

    def test_eval_deterministic(self, pipeline, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            rc = main(["eval", "--out", out, "--data", pipeline["eval"],
                       "--checkpoint", pipeline["stage2"], *TINY])
            assert rc == 0
            outs.append(open(os.path.join(out, "reports", "metrics.csv")).read())
        assert outs[0] == outs[1]


class TestAnalyzeTravel:
    def test_travel_outputs(self, pipeline, tmp_path):
        out = str(tmp_path)
        rc = main(["analyze-travel", "--out", out, "--data", pipeline["eval"],
                   "--checkpoint", pipeline["stage2"], *TINY])
        assert rc == 0
        csv = open(os.path.join(out, "reports", "travel.csv")).read()
        assert csv.splitlines()[0] == "bin_lo,bin_hi,median,q25,q75,hist_count_LQ"
        assert os.path.exists(os.path.join(out, "reports", "travel.svg"))


class TestDumpAttention:
    def test_per_layer_files(self, pipeline, tmp_path):
        out = str(tmp_path)
        scene = os.path.join(pipeline["eval"], "scene_00000.txt")
        rc = main(["dump-attention", "--out", out, "--scene", scene,
                   "--checkpoint", pipeline["stage2"], "--query", "3", *TINY])
        assert rc == 0
        files = sorted(glob.glob(os.path.join(out, "reports", "attention_*.txt")))
        assert len(files) == 2  # one per decoder layer (k_layers=2)
        body = open(files[0]).read().splitlines()
        assert body[0].startswith("ANCHOR ")
        assert body[1].startswith("BOX ")
        # 8x8 grid at cell_size=5 over a 40 m extent
        assert sum(1 for ln in body if ln.startswith("CELL ")) == 64

    def test_query_out_of_range(self, pipeline, tmp_path, capsys):
        out = str(tmp_path)
        scene = os.path.join(pipeline["eval"], "scene_00000.txt")
        rc = main(["dump-attention", "--out", out, "--scene", scene,
                   "--checkpoint", pipeline["stage2"], "--query", "99", *TINY])
        assert rc == 2


class TestAblateSchedules:
    def test_four_variant_rows(self, pipeline, tmp_path):
        out = str(tmp_path)
        rc = main(["ablate-schedules", "--out", out, "--data", pipeline["train"],
                   "--eval-data", pipeline["eval"], *TINY])
        assert rc == 0
        lines = open(os.path.join(out, "reports", "schedules.csv")).read().splitlines()
        assert lines[0] == "method,AP,ATE,ASE,AOE"
        methods = [ln.split(",")[0] for ln in lines[1:]]
        assert methods == ["Propagation", "Once", "Every 2nd", "After each"]
        assert os.path.exists(os.path.join(out, "reports", "schedules.svg"))
