import csv
import shutil

import numpy as np
import pytest

from hybridnet import cli
from hybridnet.checkpoint import checkpoint_save
from hybridnet.config import ConfigError, parse_config_text, resolve
from hybridnet.data import PreprocessSpec, make_batches, scan_dataset
from hybridnet.model import HybridConfig, HybridModel, NonFiniteLossError, TrainState, train_step


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def overfit_ckpt(shapes_root, tmp_path_factory):
    index = scan_dataset(shapes_root)
    batch = next(make_batches(index, len(index), seed=None, preprocess_spec=PreprocessSpec(32)))
    state = TrainState(HybridModel(HybridConfig.preset("desk", 2, seed=0)), 1e-3)
    for _ in range(30):
        train_step(state, batch.images, batch.labels)
    path = tmp_path_factory.mktemp("ckpt") / "overfit.hybk"
    checkpoint_save(state, path, index.label_names)
    return path


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("profile=desk\nlr=0.5\nbatch=4\nseed=1\n")
        cfg = resolve(str(cfg_file), {"batch": 16, "data_root": "x"})
        assert (cfg.preset, cfg.lr, cfg.batch, cfg.seed) == ("desk", 0.5, 16, 1)
        assert cfg.epochs == 5  # from the profile

    def test_gastrovision_profile(self):
        cfg = resolve(None, {"profile": "gastrovision", "seed": 0, "data_root": "x"})
        assert (cfg.lr, cfg.image_size, cfg.preset) == (1e-2, 224, "tiny")

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            resolve(None, {"data_root": "x"})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            parse_config_text("colour=red\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("lr=fast\n")

    def test_splits_together(self):
        with pytest.raises(ConfigError):
            resolve(None, {"seed": 0, "train_split": "a.csv"})

    def test_text_roundtrip(self):
        cfg = resolve(None, {"profile": "desk", "seed": 3, "data_root": "d", "augment": False})
        assert resolve(None, parse_config_text(cfg.to_text())) == cfg


class TestTrain:
    def args(self, root, out, seed=0):
        return ["train", "--profile", "desk", "--data-root", root, "--seed", seed,
                "--epochs", 2, "--out", out]

    def test_writes_run_dir(self, shapes_root, tmp_path):
        assert run(*self.args(shapes_root, tmp_path / "r")) == 0
        names = {p.name for p in (tmp_path / "r").iterdir()}
        assert {"config.txt", "epochs.csv", "best.hybk", "final.hybk"} <= names
        with open(tmp_path / "r" / "epochs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_rerun_identical_log(self, shapes_root, tmp_path):
        run(*self.args(shapes_root, tmp_path / "a"))
        run(*self.args(shapes_root, tmp_path / "b"))
        assert (tmp_path / "a" / "epochs.csv").read_bytes() == \
            (tmp_path / "b" / "epochs.csv").read_bytes()

    def test_frozen_config_reproduces(self, shapes_root, tmp_path):
        run(*self.args(shapes_root, tmp_path / "a"))
        shutil.copy(tmp_path / "a" / "config.txt", tmp_path / "frozen.txt")
        assert run("train", "--config", tmp_path / "frozen.txt", "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "epochs.csv").read_bytes() == \
            (tmp_path / "b" / "epochs.csv").read_bytes()

    def test_missing_root(self, tmp_path, capsys):
        assert run(*self.args(tmp_path / "nowhere", tmp_path / "r")) == 2
        assert "nowhere" in capsys.readouterr().err

    def test_missing_seed(self, shapes_root, tmp_path, capsys):
        code = run("train", "--profile", "desk", "--data-root", shapes_root,
                   "--out", tmp_path / "r")
        assert code == 2
        assert "seed" in capsys.readouterr().err

    def test_numeric_failure_exit(self, shapes_root, tmp_path, monkeypatch):
        def boom(*_):
            raise NonFiniteLossError("non-finite loss nan at step 0")

        monkeypatch.setattr("hybridnet.training.train_step", boom)
        assert run(*self.args(shapes_root, tmp_path / "r")) == 3

    def test_split_files(self, shapes_root, tmp_path):
        index = scan_dataset(shapes_root)
        rows = [(p, index.label_names[lab]) for p, lab in index.samples]
        for name, part in (("train.csv", rows[0::2]), ("test.csv", rows[1::2])):
            with open(shapes_root / name, "w") as fh:
                fh.write("filename,label\n" + "".join(f"{p},{lab}\n" for p, lab in part))
        try:
            code = run("train", "--profile", "desk", "--seed", 0, "--epochs", 1,
                       "--train-split", shapes_root / "train.csv",
                       "--test-split", shapes_root / "test.csv", "--out", tmp_path / "r")
        finally:
            (shapes_root / "train.csv").unlink()
            (shapes_root / "test.csv").unlink()
        assert code == 0


class TestCrossval:
    def test_report(self, shapes_root, tmp_path):
        code = run("crossval", "--profile", "desk", "--data-root", shapes_root, "--seed", 0,
                   "--epochs", 1, "--folds", 2, "--out", tmp_path / "cv")
        assert code == 0
        lines = (tmp_path / "cv" / "report.csv").read_text().splitlines()
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "mean", "sd"]
        for i in range(2):
            assert (tmp_path / "cv" / f"fold{i}_epochs.csv").exists()
            assert (tmp_path / "cv" / f"fold{i}_confusion.csv").exists()

    def test_fold_seeds(self, shapes_root, tmp_path, monkeypatch):
        seen = []
        real = cli.HybridConfig.preset

        def spy(name, num_classes, seed=0, image_size=None):
            seen.append(seed)
            return real(name, num_classes, seed, image_size)

        monkeypatch.setattr(cli.HybridConfig, "preset", staticmethod(spy))
        run("crossval", "--profile", "desk", "--data-root", shapes_root, "--seed", 7,
            "--epochs", 0, "--folds", 3, "--out", tmp_path / "cv")
        assert seen == [7, 8, 9]

    def test_singleton_class(self, shapes_root, tmp_path, capsys):
        root = tmp_path / "data"
        shutil.copytree(shapes_root, root)
        lonely = root / "zebra"
        lonely.mkdir()
        shutil.copy(next((root / "circle").iterdir()), lonely / "only.png")
        code = run("crossval", "--profile", "desk", "--data-root", root, "--seed", 0,
                   "--folds", 2, "--out", tmp_path / "cv")
        assert code == 2
        assert "zebra" in capsys.readouterr().err


class TestEval:
    def test_accuracy_on_training_set(self, shapes_root, overfit_ckpt, tmp_path):
        assert run("eval", "--checkpoint", overfit_ckpt, "--data-root", shapes_root,
                   "--out", tmp_path / "e") == 0
        with open(tmp_path / "e" / "metrics.csv") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["accuracy"]) >= 0.95
        assert (tmp_path / "e" / "confusion.csv").exists()

    def test_deterministic(self, shapes_root, overfit_ckpt, tmp_path):
        for d in ("a", "b"):
            run("eval", "--checkpoint", overfit_ckpt, "--data-root", shapes_root,
                "--out", tmp_path / d)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
            (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_label_mismatch(self, shapes_root, overfit_ckpt, tmp_path, capsys):
        root = tmp_path / "data"
        shutil.copytree(shapes_root, root)
        (root / "circle").rename(root / "ring")
        assert run("eval", "--checkpoint", overfit_ckpt, "--data-root", root,
                   "--out", tmp_path / "e") == 2
        assert "label table" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, shapes_root, overfit_ckpt, tmp_path):
        bad = tmp_path / "bad.hybk"
        bad.write_bytes(overfit_ckpt.read_bytes()[:200])
        assert run("eval", "--checkpoint", bad, "--data-root", shapes_root,
                   "--out", tmp_path / "e") == 2


class TestSaliency:
    def images(self, shapes_root, n=3):
        return sorted((shapes_root / "circle").iterdir())[:n]

    def test_twelve_files(self, shapes_root, overfit_ckpt, tmp_path):
        assert run("saliency", *self.images(shapes_root), "--checkpoint", overfit_ckpt,
                   "--out", tmp_path / "s") == 0
        assert len(list((tmp_path / "s").iterdir())) == 12

    def test_class_id_checked_first(self, shapes_root, overfit_ckpt, tmp_path):
        code = run("saliency", *self.images(shapes_root), "--checkpoint", overfit_ckpt,
                   "--class-id", 5, "--out", tmp_path / "s")
        assert code == 2
        assert not (tmp_path / "s").exists()

    def test_byte_identical(self, shapes_root, overfit_ckpt, tmp_path):
        for d in ("a", "b"):
            run("saliency", *self.images(shapes_root, 2), "--checkpoint", overfit_ckpt,
                "--class-id", 1, "--out", tmp_path / d)
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_bad_image_continues(self, shapes_root, overfit_ckpt, tmp_path):
        junk = tmp_path / "junk.png"
        junk.write_bytes(b"nope")
        code = run("saliency", junk, *self.images(shapes_root, 1), "--checkpoint",
                   overfit_ckpt, "--out", tmp_path / "s")
        assert code == 2
        assert len(list((tmp_path / "s").iterdir())) == 4


class TestMakeSynthetic:
    def test_layout(self, tmp_path):
        assert run("make-synthetic", "--out", tmp_path / "d", "--classes", 3,
                   "--per-class", 4) == 0
        index = scan_dataset(tmp_path / "d")
        assert index.class_counts().tolist() == [4, 4, 4]
        assert np.asarray(index.label_names).size == 3
