import json

import numpy as np
import pytest

from ssr import cli, cmpa, tensor_io


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_fixture_then_refine_smoke(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"),
                         "--images", "3")
    assert code == 0
    code, _, _ = run_cli(capsys, "refine", "--manifest", str(tmp_path / "d" / "manifest.json"),
                         "--out-dir", str(tmp_path / "r"))
    assert code == 0
    refined = sorted((tmp_path / "r" / "refined_cam").glob("*.npy"))
    pseudo = sorted((tmp_path / "r" / "pseudo_label").glob("*.npy"))
    assert len(refined) == 3 and len(pseudo) == 3
    cam = tensor_io.load_tensor(refined[0])
    assert cam.ndim == 3
    assert float(cam.min()) >= 0.0 and float(cam.max()) <= 1.0


def test_unknown_flag_exits_one(capsys):
    assert cli.main(["refine", "--bogus-flag", "x"]) == 1


def test_unknown_subcommand_exits_one(capsys):
    assert cli.main(["frobnicate"]) == 1


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0


def test_missing_manifest_exits_two(tmp_path, capsys):
    code, _, err = run_cli(capsys, "refine", "--manifest", str(tmp_path / "nope.json"),
                           "--out-dir", str(tmp_path / "r"))
    assert code == 2
    assert "nope.json" in err


def test_manifest_with_missing_file_exits_two(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "2")
    victim = next((tmp_path / "d" / "feat").glob("*.cam_seed.npy"))
    victim.unlink()
    code, _, err = run_cli(capsys, "refine", "--manifest", str(tmp_path / "d" / "manifest.json"),
                           "--out-dir", str(tmp_path / "r"))
    assert code == 2
    assert victim.name in err


def test_bad_config_value_exits_one(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "2")
    code, _, err = run_cli(capsys, "refine", "--manifest", str(tmp_path / "d" / "manifest.json"),
                           "--out-dir", str(tmp_path / "r"), "--w-clip", "0.9", "--w-dino", "0.9")
    assert code == 1
    assert "w_clip" in err


def test_numeric_failure_exits_three(tmp_path, capsys, monkeypatch):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "2")

    def boom(*a, **k):
        raise cmpa.NumericError("synthetic blowup")

    monkeypatch.setattr(cmpa, "train_align", boom)
    code, _, err = run_cli(capsys, "train-align", "--manifest",
                           str(tmp_path / "d" / "manifest.json"),
                           "--out", str(tmp_path / "ckpt"), "--iters", "1")
    assert code == 3
    assert "numeric failure" in err


def test_config_file_and_flag_override_chain(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "2")
    (tmp_path / "cfg.toml").write_text("prop_steps = 3\nratio_thresh = 0.5\n")
    code, out, err = run_cli(
        capsys, "refine", "--manifest", str(tmp_path / "d" / "manifest.json"),
        "--out-dir", str(tmp_path / "r"), "--config", str(tmp_path / "cfg.toml"),
        "--prop-steps", "4", "--json",
    )
    assert code == 0
    summary = json.loads(out)
    assert summary["config"]["prop_steps"] == 4      # flag beats file
    assert summary["config"]["ratio_thresh"] == 0.5  # file beats default
    assert summary["config"]["w_clip"] == 0.4        # default survives
    # the resolved config is echoed for reruns
    assert "prop_steps = 4" in err


def test_config_unknown_key_exits_one(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "2")
    (tmp_path / "cfg.toml").write_text("made_up_knob = 1\n")
    code, _, err = run_cli(capsys, "refine", "--manifest", str(tmp_path / "d" / "manifest.json"),
                           "--out-dir", str(tmp_path / "r"), "--config", str(tmp_path / "cfg.toml"))
    assert code == 1
    assert "made_up_knob" in err


def test_slic_subcommand_outputs(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "1")
    image = next((tmp_path / "d" / "images").glob("*.png"))
    code, out, _ = run_cli(
        capsys, "slic", "--image", str(image), "--superpixels", "32", "--regions", "4",
        "--out", str(tmp_path / "labels.npy"), "--viz", str(tmp_path / "viz.png"), "--json",
    )
    assert code == 0
    summary = json.loads(out)
    labels = np.asarray(tensor_io.load_tensor(tmp_path / "labels.npy"))
    assert labels.shape == (64, 64)
    assert labels.max() + 1 == summary["num_superpixels"]
    regions = np.asarray(tensor_io.load_tensor(tmp_path / "labels_regions.npy"))
    assert regions.max() + 1 == summary["num_regions"]
    assert (tmp_path / "viz.png").exists()


def test_prototypes_subcommand(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "4")
    code, out, _ = run_cli(capsys, "prototypes", "--manifest",
                           str(tmp_path / "d" / "manifest.json"),
                           "--out", str(tmp_path / "p"), "--json")
    assert code == 0
    summary = json.loads(out)
    p_img = np.asarray(tensor_io.load_tensor(tmp_path / "p" / "p_image.npy"))
    assert p_img.shape[0] == summary["k"] == 3
    np.testing.assert_allclose(np.linalg.norm(p_img, axis=1), 1.0, atol=1e-9)


def test_train_align_subcommand_and_checkpoint(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "4")
    code, out, _ = run_cli(
        capsys, "train-align", "--manifest", str(tmp_path / "d" / "manifest.json"),
        "--out", str(tmp_path / "ckpt"), "--iters", "10", "--lr", "1e-2",
        "--batch-size", "4", "--json",
    )
    assert code == 0
    summary = json.loads(out)
    assert summary["iterations"] == 10
    state = cmpa.load_checkpoint(tmp_path / "ckpt")
    assert state.iteration == 10
    # reuse the trained heads for prototype extraction
    code, _, _ = run_cli(capsys, "prototypes", "--manifest",
                         str(tmp_path / "d" / "manifest.json"),
                         "--out", str(tmp_path / "p2"), "--checkpoint", str(tmp_path / "ckpt"))
    assert code == 0


def test_eval_subcommand_outputs(tmp_path, capsys):
    run_cli(capsys, "fixture", "--seed", "0", "--out", str(tmp_path / "d"), "--images", "3")
    run_cli(capsys, "refine", "--manifest", str(tmp_path / "d" / "manifest.json"),
            "--out-dir", str(tmp_path / "r"))
    code, out, _ = run_cli(
        capsys, "eval", "--pred-dir", str(tmp_path / "r" / "pseudo_label"),
        "--gt-dir", str(tmp_path / "d" / "gt"), "--classes", "3",
        "--out", str(tmp_path / "report.json"), "--csv", str(tmp_path / "per_class.csv"),
        "--plot", str(tmp_path / "iou.png"), "--json",
    )
    assert code == 0
    summary = json.loads(out)
    assert 0.0 <= summary["miou"] <= 1.0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["miou"] == summary["miou"]
    lines = (tmp_path / "per_class.csv").read_text().strip().splitlines()
    assert lines[0] == "class,iou"
    assert len(lines) == 1 + 4  # background + 3 classes
    assert (tmp_path / "iou.png").exists()


def test_eval_infers_class_count(tmp_path, capsys):
    gt_dir = tmp_path / "gt"
    pred_dir = tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    gt = np.array([[0, 1], [2, 2]], dtype=np.int32)
    tensor_io.save_tensor(gt, gt_dir / "a.npy")
    tensor_io.save_tensor(gt, pred_dir / "a.npy")
    code, out, _ = run_cli(capsys, "eval", "--pred-dir", str(pred_dir),
                           "--gt-dir", str(gt_dir), "--json")
    assert code == 0
    assert json.loads(out)["miou"] == 1.0
