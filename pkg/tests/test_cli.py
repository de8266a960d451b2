import json

import numpy as np
import pytest
from PIL import Image

from darkstain.cli import main, read_config_file
from darkstain.histmatch import load_lut
from darkstain.imaging import load_image, read_manifest, to_luma


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    code = run(
        "synth-data", "--out", str(root), "--seed", "21", "--n-images", "8", "--size", "64",
        "--config", str(_synth_cfg(tmp_path_factory)),
    )
    assert code == 0
    return root


def _synth_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "synth.cfg"
    p.write_text("cells_per_image = 6,10\ncell_radius = 4.0,9.0\n")
    return p


@pytest.fixture(scope="module")
def train_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "train.cfg"
    p.write_text(
        "# desk-scale settings\n"
        "batch_size = 2\n"
        "base_width = 8\n"
        "teacher_width = 8\n"
        "patch_count = 2\n"
        "patch_size = 16\n"
    )
    return p


@pytest.fixture(scope="module")
def enhanced_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("enh")
    assert run("enhance", "--data", str(data_dir), "--out", str(out)) == 0
    return out


@pytest.fixture(scope="module")
def teacher_ckpt(data_dir, train_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("teach")
    code = run("pretrain-teacher", "--data", str(data_dir), "--out", str(out),
               "--config", str(train_cfg), "--seed", "1", "--steps", "6", "--size", "32")
    assert code == 0
    return out / "teacher.pt"


@pytest.fixture(scope="module")
def student_ckpt(data_dir, enhanced_dir, teacher_ckpt, train_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = run("train", "--data", str(data_dir), "--lut", str(enhanced_dir / "lut.txt"),
               "--teacher", str(teacher_ckpt), "--out", str(out), "--config", str(train_cfg),
               "--seed", "2", "--steps", "4", "--size", "32")
    assert code == 0
    return out / "student.pt"


class TestSynthData:
    def test_layout_and_manifest(self, data_dir):
        assert (data_dir / "dark").is_dir() and (data_dir / "bright").is_dir()
        assert len(read_manifest(data_dir / "dark_manifest.txt")) == 8
        assert len(read_manifest(data_dir / "bright_manifest.txt")) == 8
        manifest = json.loads((data_dir / "run.json").read_text())
        assert manifest["subcommand"] == "synth-data"
        assert manifest["seed"] == 21

    def test_bad_size_exits_2(self, tmp_path):
        assert run("synth-data", "--out", str(tmp_path), "--size", "65") == 2

    def test_reference_scale_counts(self, tmp_path):
        # the published training split size: 559 images per domain
        code = run("synth-data", "--out", str(tmp_path), "--n-images", "559", "--size", "64",
                   "--config", str(tmp_path / "s.cfg")) if False else None
        cfg = tmp_path / "s.cfg"
        cfg.write_text("cells_per_image = 4,7\ncell_radius = 3.0,6.0\n")
        code = run("synth-data", "--out", str(tmp_path), "--n-images", "559", "--size", "64",
                   "--config", str(cfg))
        assert code == 0
        assert len(read_manifest(tmp_path / "dark_manifest.txt")) == 559
        assert len(read_manifest(tmp_path / "bright_manifest.txt")) == 559


class TestEnhance:
    def test_lut_has_256_lines(self, enhanced_dir):
        lines = (enhanced_dir / "lut.txt").read_text().splitlines()
        assert len(lines) == 257
        lut, header = load_lut(enhanced_dir / "lut.txt")
        assert set(header) == {"dark", "bright"}

    def test_rerun_is_byte_identical(self, data_dir, enhanced_dir, tmp_path):
        assert run("enhance", "--data", str(data_dir), "--out", str(tmp_path)) == 0
        assert (tmp_path / "lut.txt").read_bytes() == (enhanced_dir / "lut.txt").read_bytes()
        name = sorted(p.name for p in (tmp_path / "enhanced").iterdir())[0]
        assert (tmp_path / "enhanced" / name).read_bytes() == (
            enhanced_dir / "enhanced" / name
        ).read_bytes()

    def test_enhanced_mean_luma_tracks_bright_domain(self, data_dir, enhanced_dir):
        bright = [load_image(p) for p in read_manifest(data_dir / "bright_manifest.txt")]
        enhanced = [load_image(p) for p in sorted((enhanced_dir / "enhanced").iterdir())]
        bright_mean = np.mean([to_luma(b).mean() for b in bright])
        enhanced_mean = np.mean([to_luma(z).mean() for z in enhanced])
        assert abs(bright_mean - enhanced_mean) < 0.1

    def test_per_image_mode_runs(self, data_dir, tmp_path):
        assert run("enhance", "--data", str(data_dir), "--out", str(tmp_path), "--per-image") == 0

    def test_missing_data_exits_3(self, tmp_path):
        assert run("enhance", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path)) == 3


class TestTrainAndStain:
    def test_train_writes_losses_and_manifest(self, student_ckpt):
        out = student_ckpt.parent
        assert (out / "losses.csv").exists()
        manifest = json.loads((out / "run.json").read_text())
        assert manifest["subcommand"] == "train"

    def test_stain_single_png(self, data_dir, enhanced_dir, student_ckpt, tmp_path):
        src = read_manifest(data_dir / "dark_manifest.txt")[0]
        code = run("stain", "--input", str(src), "--lut", str(enhanced_dir / "lut.txt"),
                   "--student", str(student_ckpt), "--out", str(tmp_path))
        assert code == 0
        out_img = np.asarray(Image.open(tmp_path / src.name))
        in_img = np.asarray(Image.open(src))
        assert out_img.shape[:2] == in_img.shape[:2]
        assert out_img.ndim == 3 and out_img.shape[2] == 3

    def test_stain_directory(self, data_dir, enhanced_dir, student_ckpt, tmp_path):
        code = run("stain", "--input", str(data_dir / "dark"), "--lut",
                   str(enhanced_dir / "lut.txt"), "--student", str(student_ckpt),
                   "--out", str(tmp_path))
        assert code == 0
        assert len(list(tmp_path.glob("*.png"))) == 8

    def test_missing_checkpoint_exits_3(self, data_dir, enhanced_dir, tmp_path):
        src = read_manifest(data_dir / "dark_manifest.txt")[0]
        code = run("stain", "--input", str(src), "--lut", str(enhanced_dir / "lut.txt"),
                   "--student", str(tmp_path / "none.pt"), "--out", str(tmp_path))
        assert code == 3

    def test_bad_config_key_exits_2(self, data_dir, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("no_such_key = 1\n")
        code = run("pretrain-teacher", "--data", str(data_dir), "--out", str(tmp_path),
                   "--config", str(bad))
        assert code == 2


class TestEvaluateCli:
    def test_external_embedder_weights(self, tmp_path):
        from darkstain.networks import build_embedder, save_checkpoint

        code = run("synth-data", "--out", str(tmp_path / "d"), "--seed", "32",
                   "--n-images", "3", "--size", "96")
        assert code == 0
        emb = build_embedder(5)
        save_checkpoint(tmp_path / "emb.pt", kind="embedder",
                        states={"embedder": emb.state_dict()}, meta={"seed": 5})
        bright = tmp_path / "d" / "bright"
        code = run("evaluate", "--outputs", str(bright), "--reference", str(bright),
                   "--enhanced", str(bright), "--out", str(tmp_path / "r.csv"),
                   "--embedder-weights", str(tmp_path / "emb.pt"))
        assert code == 0

    def test_missing_embedder_weights_exits_3(self, tmp_path):
        code = run("synth-data", "--out", str(tmp_path / "d"), "--seed", "33",
                   "--n-images", "3", "--size", "96")
        assert code == 0
        bright = tmp_path / "d" / "bright"
        code = run("evaluate", "--outputs", str(bright), "--reference", str(bright),
                   "--enhanced", str(bright), "--out", str(tmp_path / "r.csv"),
                   "--embedder-weights", str(tmp_path / "missing.pt"))
        assert code == 3

    def test_fit_niqe_subcommand(self, tmp_path):
        code = run("synth-data", "--out", str(tmp_path / "d"), "--seed", "34",
                   "--n-images", "3", "--size", "96")
        assert code == 0
        code = run("fit-niqe", "--images", str(tmp_path / "d" / "bright"),
                   "--out", str(tmp_path / "model.npz"))
        assert code == 0
        from darkstain.metrics import NiqeModel

        model = NiqeModel.load(tmp_path / "model.npz")
        assert model.mean.shape == (36,)

    def test_identical_outputs_give_zero_fid(self, tmp_path):
        code = run("synth-data", "--out", str(tmp_path / "d"), "--seed", "31",
                   "--n-images", "4", "--size", "96")
        assert code == 0
        bright = tmp_path / "d" / "bright"
        code = run("evaluate", "--outputs", str(bright), "--reference", str(bright),
                   "--enhanced", str(bright), "--out", str(tmp_path / "results.csv"))
        assert code == 0
        rows = (tmp_path / "results.csv").read_text().strip().splitlines()
        header, row = rows[0].split(","), rows[1].split(",")
        record = dict(zip(header, row))
        assert abs(float(record["fid"])) < 1e-6
        assert abs(float(record["kid"])) < 1e-3


def test_config_file_parser(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nbatch_size = 3\nlambda1 = 5.5\n\nflips = true\n")
    raw = read_config_file(p)
    assert raw == {"batch_size": "3", "lambda1": "5.5", "flips": "true"}
    from darkstain.cli import train_config_from_sources

    cfg = train_config_from_sources(str(p), {})
    assert cfg.batch_size == 3
    assert cfg.weights.lambda1 == 5.5
    assert cfg.flips is True
