import json
import os

import numpy as np
import pytest
from PIL import Image

from defgen import rngs
from defgen.cli import main
from defgen.data_io import checkpoint_load_full, checkpoint_save
from defgen.generators import ArchitectureConfig, init_params


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out.splitlines(), captured.err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["synth", "--count", "10", "--size", "8", "--seed", "3",
                 "--out", str(out)])
    capsys.readouterr()
    assert code == 0
    return out


@pytest.fixture
def ckpt(tmp_path, synth_dir, capsys):
    out = tmp_path / "run"
    code = main(["train", "--data", str(synth_dir / "images"), "--size", "8",
                 "--iters", "2", "--batch", "5", "--lr", "1e-3",
                 "--langevin-steps", "2", "--step-size", "0.05",
                 "--seed", "5", "--out", str(out)])
    capsys.readouterr()
    assert code == 0
    return out / "final.ckpt"


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["synth", "--wat", "1"]) == 1

    def test_missing_checkpoint_is_data_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "interpolate", "--ckpt",
                           str(tmp_path / "absent.ckpt"), "--out", str(tmp_path))
        assert code == 2
        assert "error:" in err

    def test_unsupported_size_is_usage_error(self, synth_dir, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--data", str(synth_dir / "images"),
                         "--size", "7", "--iters", "1", "--out", str(tmp_path / "o"))
        assert code == 1

    def test_nan_weights_fail_numerically(self, tmp_path, synth_dir, capsys):
        params = init_params(ArchitectureConfig.tiny8(d=4),
                             np.random.default_rng(0))
        params.appearance_weights[0]["weight"][0, 0] = np.nan
        bad = tmp_path / "bad.ckpt"
        checkpoint_save(params, None, str(bad))
        code, _, err = run(capsys, "infer", "--ckpt", str(bad), "--data",
                           str(synth_dir / "images"), "--steps", "1",
                           "--out", str(tmp_path / "o"))
        assert code == 3
        assert "numeric" in err


class TestConfigEcho:
    def test_first_line_is_resolved_json(self, tmp_path, capsys):
        code, lines, _ = run(capsys, "synth", "--count", "2", "--size", "8",
                             "--out", str(tmp_path / "s"))
        assert code == 0
        echo = json.loads(lines[0])
        assert echo["command"] == "synth"
        assert echo["count"] == 2
        assert echo["seed"] == 0          # defaults resolved, not omitted
        assert echo["out"] == str(tmp_path / "s")

    def test_env_var_supplies_out_dir(self, tmp_path, capsys, monkeypatch):
        target = tmp_path / "from-env"
        monkeypatch.setenv("DEFGEN_OUT", str(target))
        code, lines, _ = run(capsys, "synth", "--count", "2", "--size", "8")
        assert code == 0
        assert json.loads(lines[0])["out"] == str(target)
        assert (target / "factors.csv").exists()


class TestSynth:
    def test_writes_images_and_factor_table(self, synth_dir):
        names = sorted(os.listdir(synth_dir / "images"))
        assert len(names) == 10
        assert names[0] == "synth-00000.png"
        header = (synth_dir / "factors.csv").read_text().splitlines()[0]
        assert header.startswith("id,")
        assert "tx" in header and "hue" in header

    def test_same_argv_gives_identical_bytes(self, tmp_path, capsys):
        for out in ("a", "b"):
            assert main(["synth", "--count", "4", "--size", "8", "--seed", "9",
                         "--out", str(tmp_path / out)]) == 0
        capsys.readouterr()
        for rel in (os.path.join("images", "synth-00002.png"), "factors.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes()


class TestTrain:
    def test_zero_iterations_checkpoints_initialization(self, tmp_path, synth_dir,
                                                        capsys):
        out = tmp_path / "init-run"
        code, lines, _ = run(capsys, "train", "--data", str(synth_dir / "images"),
                             "--size", "8", "--iters", "0", "--seed", "4",
                             "--out", str(out))
        assert code == 0
        loaded = checkpoint_load_full(str(out / "final.ckpt"))
        from dataclasses import replace

        arch = replace(ArchitectureConfig.tiny8(), alpha=0.625)
        want = init_params(arch, rngs.stream(4, "init"))
        for (n1, t1), (n2, t2) in zip(loaded.params.all_tensors(),
                                      want.all_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1, t2)

    def test_resume_continues_iteration_count(self, tmp_path, synth_dir, capsys):
        out1 = tmp_path / "p1"
        assert main(["train", "--data", str(synth_dir / "images"), "--size", "8",
                     "--iters", "2", "--batch", "5", "--langevin-steps", "2",
                     "--seed", "6", "--out", str(out1)]) == 0
        out2 = tmp_path / "p2"
        code, lines, _ = run(capsys, "train", "--data", str(synth_dir / "images"),
                             "--size", "8", "--iters", "4", "--batch", "5",
                             "--langevin-steps", "2", "--seed", "6",
                             "--resume", str(out1 / "final.ckpt"),
                             "--out", str(out2))
        assert code == 0
        assert checkpoint_load_full(str(out2 / "final.ckpt")).header["iteration"] == 4


class TestArtifacts:
    def test_interpolate_grid_is_one_row_of_eleven(self, ckpt, tmp_path, capsys):
        out = tmp_path / "i"
        code, _, _ = run(capsys, "interpolate", "--ckpt", str(ckpt),
                         "--vector", "geo", "--dim", "1", "--out", str(out))
        assert code == 0
        with Image.open(out / "interpolate.png") as im:
            assert im.size == (11 * 8, 8)

    def test_infer_writes_latent_table(self, ckpt, synth_dir, tmp_path, capsys):
        out = tmp_path / "n"
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--data",
                         str(synth_dir / "images"), "--steps", "2",
                         "--out", str(out))
        assert code == 0
        lines = (out / "latents.csv").read_text().splitlines()
        assert lines[0].startswith("id,za0,")
        assert len(lines) == 11
        assert (out / "reconstructions.png").exists()

    def test_swap_rejects_bad_index(self, ckpt, synth_dir, tmp_path, capsys):
        code, _, _ = run(capsys, "swap", "--ckpt", str(ckpt), "--data",
                         str(synth_dir / "images"), "--a", "0", "--b", "99",
                         "--steps", "1", "--out", str(tmp_path / "w"))
        assert code == 2

    def test_swap_writes_four_panel_grid(self, ckpt, synth_dir, tmp_path, capsys):
        out = tmp_path / "w"
        code, _, _ = run(capsys, "swap", "--ckpt", str(ckpt), "--data",
                         str(synth_dir / "images"), "--a", "0", "--b", "3",
                         "--steps", "1", "--out", str(out))
        assert code == 0
        with Image.open(out / "swap.png") as im:
            assert im.size == (4 * 8, 8)

    def test_covariance_outputs_all_dims(self, ckpt, synth_dir, tmp_path, capsys):
        out = tmp_path / "c"
        code, lines, _ = run(capsys, "covariance", "--ckpt", str(ckpt),
                             "--data", str(synth_dir / "images"),
                             "--factors", str(synth_dir / "factors.csv"),
                             "--factor", "tx", "--steps", "2", "--out", str(out))
        assert code == 0
        assert lines[1].startswith("max_r_g=")
        rows = (out / "covariance.csv").read_text().splitlines()
        params = checkpoint_load_full(str(ckpt)).params
        assert len(rows) == 1 + params.d_g + params.d_a

    def test_covariance_missing_factor_row(self, ckpt, synth_dir, tmp_path, capsys):
        trimmed = tmp_path / "trimmed.csv"
        lines = (synth_dir / "factors.csv").read_text().splitlines()
        trimmed.write_text("\n".join(lines[:-1]) + "\n")
        code, _, _ = run(capsys, "covariance", "--ckpt", str(ckpt),
                         "--data", str(synth_dir / "images"),
                         "--factors", str(trimmed), "--factor", "tx",
                         "--steps", "1", "--out", str(tmp_path / "c"))
        assert code == 2

    def test_reconstruct_reports_convention(self, ckpt, synth_dir, tmp_path,
                                            capsys):
        out = tmp_path / "r"
        code, lines, _ = run(capsys, "reconstruct", "--ckpt", str(ckpt),
                             "--data", str(synth_dir / "images"), "--steps", "2",
                             "--convention", "mean01", "--out", str(out))
        assert code == 0
        assert "convention=mean01" in lines[1]
        assert (out / "reconstruction.csv").read_text().startswith("id,error")

    def test_warp_apply_requires_model_resolution(self, ckpt, tmp_path, capsys):
        big = tmp_path / "big.png"
        Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(big)
        code, _, _ = run(capsys, "warp-apply", "--ckpt", str(ckpt),
                         "--image", str(big), "--out", str(tmp_path / "v"))
        assert code == 2

    def test_warp_apply_emits_sweep(self, ckpt, synth_dir, tmp_path, capsys):
        img = synth_dir / "images" / "synth-00001.png"
        out = tmp_path / "v"
        code, _, _ = run(capsys, "warp-apply", "--ckpt", str(ckpt),
                         "--image", str(img), "--gamma", "1.0",
                         "--out", str(out))
        assert code == 0
        with Image.open(out / "warp.png") as im:
            assert im.size == (11 * 8, 8)

    def test_transfer_keeps_geometry(self, ckpt, synth_dir, tmp_path, capsys):
        out = tmp_path / "x"
        code, _, _ = run(capsys, "transfer", "--ckpt", str(ckpt), "--data",
                         str(synth_dir / "images"), "--iters", "2",
                         "--batch", "5", "--langevin-steps", "2",
                         "--out", str(out))
        assert code == 0
        before = dict(checkpoint_load_full(str(ckpt)).params.all_tensors())
        after = dict(checkpoint_load_full(str(out / "final.ckpt")).params.all_tensors())
        for name in before:
            if name.startswith("geometric/"):
                np.testing.assert_array_equal(before[name], after[name])
        assert any(
            not np.array_equal(before[n], after[n])
            for n in before if n.startswith("appearance/")
        )
