import pytest

from app.cli import build_parser, main
from app.services.dataset import MANIFEST, DatasetReader, write_poses
from app.services.pipeline import REPORT_JSON, TRACE_FILE
from tests.conftest import small_scene

SMALL_SETS = [
    "--set", "rpf.sampler.count=8",
    "--set", "rpf.scorer.model_points=32",
    "--set", "rpf.refine_iterations=3",
    "--set", "rpf.refine_points=64",
    "--set", "m3d.lk.grid_step=4",
]


def test_generate_from_scene_config(tmp_path, capsys):
    scene_file = tmp_path / "scene.json"
    scene_file.write_text(small_scene().model_dump_json())
    out = tmp_path / "generated"
    code = main(["generate", "--scene-config", str(scene_file), "--frame-rate", "20", "--out", str(out)])
    assert code == 0
    assert (out / MANIFEST).exists()
    assert len(DatasetReader(out)) == 4
    assert "generated 4 frames" in capsys.readouterr().out


def test_generate_rejects_bad_scene(tmp_path):
    assert main(["generate", "--duration", "-1", "--out", str(tmp_path / "x")]) == 2


def test_track_writes_outputs(dataset_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["track", "--dataset", str(dataset_dir), "--out", str(out), "--workers", "1", *SMALL_SETS]) == 0
    assert (out / TRACE_FILE).exists()
    assert (out / REPORT_JSON).exists()


def test_track_missing_dataset(tmp_path):
    assert main(["track", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path / "run")]) == 2


def test_bad_set_flag(dataset_dir, tmp_path):
    assert main(["track", "--dataset", str(dataset_dir), "--out", str(tmp_path), "--set", "amq.n"]) == 2
    assert main(["track", "--dataset", str(dataset_dir), "--out", str(tmp_path), "--set", "amq.alpha=3"]) == 2


def test_eval_length_mismatch(dataset_dir, tmp_path):
    trace = tmp_path / "short.txt"
    write_poses(trace, DatasetReader(dataset_dir).poses[:2])
    code = main(["eval", "--dataset", str(dataset_dir), "--trace", str(trace), "--out", str(tmp_path / "eval")])
    assert code == 3


def test_eval_ground_truth(dataset_dir, tmp_path, capsys):
    trace = tmp_path / "gt.txt"
    write_poses(trace, DatasetReader(dataset_dir).poses)
    code = main(["eval", "--dataset", str(dataset_dir), "--trace", str(trace), "--out", str(tmp_path / "eval")])
    assert code == 0
    assert "add@0.1d=1.000" in capsys.readouterr().out


@pytest.mark.parametrize("target,expected", [("0", 0), ("1e9", 4)])
def test_bench_exit_code(dataset_dir, tmp_path, target, expected):
    args = ["bench", "--dataset", str(dataset_dir), "--out", str(tmp_path), "--workers", "1", "--target", target]
    assert main([*args, *SMALL_SETS]) == expected


def test_ablate_flip_axis(dataset_dir, tmp_path, capsys):
    assert main(["ablate", "--axis", "amq_flip", "--dataset", str(dataset_dir), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.count("amq_flip=") == 5


def test_unknown_axis_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["ablate", "--axis", "lighting"])
    assert exc.value.code == 2
