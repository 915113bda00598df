import csv
import json

import numpy as np
import pytest

from protolab.cli import main
from protolab.data import load_dataset, read_ppm
from protolab.model import ProtoPNet

TINY_DATA = ["--classes", "3", "--train-per-class", "4", "--test-per-class", "3", "--seed", "7"]
TINY_TRAIN = ["--warmup-epochs", "1", "--joint-epochs", "1", "--last-layer-iters", "2"]


def tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), *TINY_DATA]) == 0
    assert main(["gen-data", "--out", str(root / "jdata"), *TINY_DATA, "--corrupt-fraction", "0.67"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "std"), *TINY_TRAIN]) == 0
    assert main(["train", "--data", str(root / "jdata"), "--out", str(root / "jstd"), *TINY_TRAIN]) == 0
    return root


class TestGenData:
    def test_counts_and_manifest(self, workdir):
        d = load_dataset(workdir / "data")
        assert len(d.train) == 12 and len(d.test) == 9
        m = json.loads((workdir / "data" / "run_manifest.json").read_text())
        assert m["command"] == "gen-data" and m["seed"] == 7
        listed = set(m["outputs"])
        assert {str(p) for p in tree(workdir / "data")} == listed

    def test_reference_size(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--classes", "10", "--seed", "7", "--test-per-class", "1",
                     "--train-per-class", "1"]) == 0
        assert len(list((tmp_path / "images").glob("*.ppm"))) == 20

    def test_missing_out(self, capsys):
        assert main(["gen-data", "--classes", "3"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_same_flags_same_directory(self, workdir, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), *TINY_DATA]) == 0
        assert tree(tmp_path) == tree(workdir / "data")

    def test_too_many_classes(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--classes", "99"]) == 2

    def test_corruption_list(self, workdir):
        d = load_dataset(workdir / "jdata")
        assert len(d.corrupted_classes) == 2


class TestTrain:
    def test_outputs(self, workdir):
        out = workdir / "std"
        rows = list(csv.DictReader(open(out / "metrics.csv")))
        assert [r["stage"] for r in rows] == ["warmup", "joint", "push", "last_layer", "last_layer"]
        model = ProtoPNet.load(out / "model.ckpt")
        assert all(p is not None for p in model.bank.provenance)
        m = json.loads((out / "run_manifest.json").read_text())
        assert m["config"]["regime"] == "standard" and m["config"]["train"]["joint_epochs"] == 1

    def test_rerun_from_manifest_bitwise(self, workdir, tmp_path):
        m = json.loads((workdir / "std" / "run_manifest.json").read_text())
        argv = list(m["argv"])
        argv[argv.index("--out") + 1] = str(tmp_path)
        assert main(argv) == 0
        assert tree(tmp_path) == tree(workdir / "std")

    def test_adv_regime_defaults(self, workdir, tmp_path):
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path), "--regime", "adv",
                     "--warmup-epochs", "0", "--joint-epochs", "0", "--last-layer-iters", "0"]) == 0
        m = json.loads((tmp_path / "run_manifest.json").read_text())
        assert m["config"]["adversarial"] == {"step": 10 / 255, "budget": 8 / 255, "epochs": 10}

    def test_jpeg_aug_regime(self, workdir, tmp_path):
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path), "--regime", "jpeg-aug",
                     "--warmup-epochs", "0", "--joint-epochs", "0", "--last-layer-iters", "0"]) == 0
        aug = json.loads((tmp_path / "run_manifest.json").read_text())["config"]["augment"]
        assert aug["jpeg_prob"] == 0.5 and aug["jpeg_quality"] == 20

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_divergence_exit_code(self, workdir, tmp_path, monkeypatch):
        from protolab import cli
        from protolab.training import TrainingDiverged

        def boom(*a, **k):
            raise TrainingDiverged("joint", 3, "loss = nan")

        monkeypatch.setattr(cli, "train_schedule", boom)
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path)]) == 3


class TestAttack:
    def _correct_id(self, workdir):
        model = ProtoPNet.load(workdir / "std" / "model.ckpt")
        d = load_dataset(workdir / "data")
        ok = np.flatnonzero(model.predict(d.test.images) == d.test.labels)
        assert ok.size
        return d.test.ids[ok[0]]

    def test_record_and_overlays(self, workdir, tmp_path):
        image_id = self._correct_id(workdir)
        assert main(["attack", "--checkpoint", str(workdir / "std" / "model.ckpt"), "--data", str(workdir / "data"),
                     "--image-id", image_id, "--out", str(tmp_path), "--iterations", "5"]) == 0
        rec = json.loads((tmp_path / "attack.json").read_text())[0]
        assert rec["budget"] == 8 / 255 and isinstance(rec["success"], bool)
        assert rec["delta_linf"] <= rec["budget"]
        overlay = read_ppm(tmp_path / "clean_overlay.ppm")
        y0, y1, x0, x1 = rec["clean_box"]
        np.testing.assert_allclose(overlay[:, y0, x0], [1.0, 1.0, 0.0])
        assert (tmp_path / "prototype_source.ppm").exists()

    def test_zero_iterations_identical_overlays(self, workdir, tmp_path):
        image_id = self._correct_id(workdir)
        assert main(["attack", "--checkpoint", str(workdir / "std" / "model.ckpt"), "--data", str(workdir / "data"),
                     "--image-id", image_id, "--out", str(tmp_path), "--iterations", "0"]) == 0
        a, b = read_ppm(tmp_path / "clean_overlay.ppm"), read_ppm(tmp_path / "attacked_overlay.ppm")
        assert np.array_equal(a, b)

    def test_misclassified_exit_4(self, workdir, tmp_path):
        model = ProtoPNet.load(workdir / "std" / "model.ckpt")
        model.last_layer.data[...] = 0.0
        model.last_layer.data[0] = 1.0  # always predicts class 0
        model.save(tmp_path / "bad.ckpt")
        d = load_dataset(workdir / "data")
        image_id = d.test.ids[int(np.flatnonzero(d.test.labels == 1)[0])]
        assert main(["attack", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(workdir / "data"),
                     "--image-id", image_id, "--out", str(tmp_path / "o")]) == 4

    def test_bad_checkpoint_exit_5(self, workdir, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
        assert main(["attack", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(workdir / "data"),
                     "--image-id", "test_000_0000", "--out", str(tmp_path / "o")]) == 5


class TestSusceptibility:
    def test_empty_list(self, tmp_path):
        assert main(["susceptibility", "--out", str(tmp_path / "s.csv")]) == 0
        assert (tmp_path / "s.csv").read_text().strip() == (
            "checkpoint,regime,clean_accuracy,adversarial_accuracy,success_rate,n_images,still_correct_fraction")

    def test_two_rows(self, workdir, tmp_path):
        ckpt = str(workdir / "std" / "model.ckpt")
        assert main(["susceptibility", "--checkpoint", ckpt, "--checkpoint", ckpt, "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "s.csv"), "--n-images", "2", "--k", "1", "--iterations", "2",
                     "--skip-adversarial-accuracy"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert len(rows) == 2 and rows[0]["success_rate"] == rows[1]["success_rate"]
        assert rows[0]["regime"] == "standard"


class TestJpegExp:
    def test_lossless_ablation(self, workdir, tmp_path):
        assert main(["jpeg-exp", "--checkpoint", str(workdir / "jstd" / "model.ckpt"), "--data",
                     str(workdir / "jdata"), "--clean-data", str(workdir / "data"), "--out", str(tmp_path),
                     "--quality", "100", "--no-subsampling", "--recompress"]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        if summary["n"]:
            assert abs(summary["median_relative_drop"]) < 0.05
        rows = list(csv.DictReader(open(tmp_path / "consistency.csv")))
        assert len(rows) == summary["n"]

    def test_histograms(self, workdir, tmp_path):
        assert main(["jpeg-exp", "--checkpoint", str(workdir / "jstd" / "model.ckpt"), "--data",
                     str(workdir / "jdata"), "--clean-data", str(workdir / "data"), "--out", str(tmp_path),
                     "--histograms", "1"]) == 0
        svgs = sorted(tmp_path.glob("*.svg"))
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert len(svgs) == (2 if summary["n"] else 0)

    def test_corruption_list_mismatch(self, workdir, tmp_path):
        assert main(["jpeg-exp", "--checkpoint", str(workdir / "std" / "model.ckpt"), "--data",
                     str(workdir / "jdata"), "--clean-data", str(workdir / "data"), "--out", str(tmp_path)]) == 5


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--instances", "1"]) == 0
        out = capsys.readouterr().out
        for name in ("conv2d", "maxpool2d", "log_similarity", "total_loss"):
            assert name in out

    def test_fault_injection(self, capsys):
        assert main(["gradcheck", "--instances", "1", "--inject-fault", "sigmoid"]) == 1
        assert "FAIL" in capsys.readouterr().out
