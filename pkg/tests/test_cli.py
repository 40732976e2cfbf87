import numpy as np
import pytest

from sonarseg.cli import EXIT_DATA, EXIT_IO, EXIT_USAGE, RunConfig, main
from sonarseg.model import SegmentationModel, encode_weights, load_weights, save_weights, weights_of
from sonarseg.report import parse_kv
from sonarseg.sonar import read_pgm, write_pgm
from sonarseg.train import LOG_HEADER, read_log


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--n", "5", "--seed", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def weights(tmp_path_factory, corpus):
    d = tmp_path_factory.mktemp("cliw") / "run"
    assert main(["train", "--data", str(corpus), "--out", str(d), "--epochs", "1", "--seed", "1"]) == 0
    return d / "best.sseg"


def _tree(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        rc, out, _ = run(capsys, "synth", "--n", 3, "--seed", 7, "--out", tmp_path / name)
        assert rc == 0
        assert parse_kv(out)["samples"] == "3"
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert len(a) == 7 and a == b


def test_synth_missing_parent_fails_clearly(tmp_path, capsys):
    rc, _, err = run(capsys, "synth", "--n", 1, "--out", tmp_path / "nope" / "deeper")
    assert rc == EXIT_IO
    assert "does not exist" in err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    capsys.readouterr()
    rc, _, err = run(capsys, "train", "--data", tmp_path, "--out", tmp_path / "o", "--split", 1.5)
    assert rc == EXIT_USAGE and "--split" in err


def test_epochs_zero_writes_initial_weights(tmp_path, corpus, capsys):
    rc, _, _ = run(capsys, "train", "--data", corpus, "--out", tmp_path / "r", "--epochs", 0, "--seed", 4)
    assert rc == 0
    save_weights(SegmentationModel(seed=4), tmp_path / "init.sseg")
    assert (tmp_path / "r" / "best.sseg").read_bytes() == (tmp_path / "init.sseg").read_bytes()
    assert (tmp_path / "r" / "train.log").read_text() == LOG_HEADER + "\n"
    assert read_log(tmp_path / "r" / "train.log") == []
    assert (tmp_path / "r" / "curves.png").stat().st_size > 0


def test_config_file_and_flag_precedence(tmp_path, corpus, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for this run\nepochs=3\nlr=1e-3\naugment=false\nseed=9\n")
    rc, _, _ = run(capsys, "train", "--config", cfg, "--data", corpus, "--out", tmp_path / "r", "--epochs", 0)
    assert rc == 0
    used = parse_kv((tmp_path / "r" / "config.txt").read_text())
    assert used["epochs"] == "0"  # flag wins
    assert float(used["lr"]) == 1e-3 and used["augment"] == "false" and used["seed"] == "9"
    assert used["batch_size"] == "4" and float(used["split"]) == 0.8 and float(used["threshold"]) == 0.5
    cfg.write_text("colour=blue\n")
    rc, _, err = run(capsys, "train", "--config", cfg, "--data", corpus, "--out", tmp_path / "r2")
    assert rc == EXIT_USAGE and "colour" in err


def test_defaults_reproduce_training_hyperparameters(tmp_path, corpus, capsys):
    run(capsys, "train", "--data", corpus, "--out", tmp_path / "r", "--epochs", 0)
    used = parse_kv((tmp_path / "r" / "config.txt").read_text())
    assert float(used["lr"]) == 0.5e-4 and used["batch_size"] == "4" and used["augment"] == "true"
    assert RunConfig().epochs == 100


def test_missing_dataset_is_an_io_error(tmp_path, capsys):
    rc, _, _ = run(capsys, "train", "--data", tmp_path / "absent", "--out", tmp_path / "r")
    assert rc == EXIT_IO


def test_missing_mask_is_a_data_error(tmp_path, corpus, capsys):
    import shutil
    d = tmp_path / "broken"
    shutil.copytree(corpus, d)
    next((d / "masks").glob("*.pgm")).unlink()
    rc, _, err = run(capsys, "train", "--data", d, "--out", tmp_path / "r", "--epochs", 0)
    assert rc == EXIT_DATA and "mask" in err


def test_infer_single_and_batch(tmp_path, corpus, weights, capsys):
    imgs = sorted((corpus / "images").glob("*.pgm"))
    rc, out, _ = run(capsys, "infer", "--weights", weights, "--out", tmp_path / "one", imgs[0])
    assert rc == 0 and parse_kv(out)["files"] == "3"
    files = sorted(p.name for p in (tmp_path / "one").iterdir())
    stem = imgs[0].stem
    assert files == [f"{stem}_composite.pgm", f"{stem}_mask.pgm", f"{stem}_prob.pgm"]
    mask = read_pgm(tmp_path / "one" / f"{stem}_mask.pgm")
    assert set(np.unique(mask)) <= {0, 255}
    assert read_pgm(tmp_path / "one" / f"{stem}_composite.pgm").shape == (128, 640)

    # nine inputs: copies under distinct names
    batch = []
    src = read_pgm(imgs[0])
    for k in range(9):
        p = tmp_path / "in" / f"frame_{k}.pgm"
        p.parent.mkdir(exist_ok=True)
        write_pgm(p, np.roll(src, k, axis=1))
        batch.append(p)
    rc, _, _ = run(capsys, "infer", "--weights", weights, "--out", tmp_path / "nine", *batch)
    assert rc == 0
    names = sorted(p.name for p in (tmp_path / "nine").iterdir())
    assert len(names) == 27
    assert names == sorted(f"frame_{k}_{kind}.pgm" for k in range(9) for kind in ("composite", "mask", "prob"))


def test_infer_rejects_wrong_image_size(tmp_path, weights, capsys):
    write_pgm(tmp_path / "small.pgm", np.zeros((64, 64), np.uint8))
    rc, _, _ = run(capsys, "infer", "--weights", weights, "--out", tmp_path / "o", tmp_path / "small.pgm")
    assert rc == EXIT_DATA


def test_infer_rejects_foreign_weights(tmp_path, corpus, capsys):
    small = SegmentationModel(seed=0, batch_norm=False)
    save_weights(small, tmp_path / "nobn.sseg")
    img = next((corpus / "images").glob("*.pgm"))
    rc, _, err = run(capsys, "infer", "--weights", tmp_path / "nobn.sseg", "--out", tmp_path / "o", img)
    assert rc == EXIT_DATA and "layer" in err


def test_quantize_eval_and_bench(tmp_path, corpus, weights, capsys):
    q = tmp_path / "m.ssg8"
    rc, out, _ = run(capsys, "quantize", "--weights", weights, "--out", q)
    assert rc == 0
    kv = parse_kv(out)
    assert float(kv["size_reduction_ratio"]) >= 7.0
    assert int(kv["bytes"]) == q.stat().st_size
    base = len(encode_weights(load_weights(weights), np.float64))
    assert base / q.stat().st_size >= 7.0

    rc, out, _ = run(capsys, "quantize", "--weights", weights, "--out", tmp_path / "h.sseg", "--float16")
    assert rc == 0
    half = load_weights(tmp_path / "h.sseg")
    assert all(r.data.dtype == np.float16 for r in half.records)

    results = {}
    for name, w in (("float", weights), ("q8", q)):
        rc, out, _ = run(capsys, "eval", "--weights", w, "--data", corpus, "--out", tmp_path / f"ev_{name}")
        assert rc == 0
        results[name] = parse_kv(out)
        assert (tmp_path / f"ev_{name}" / "panels.png").stat().st_size > 0
        assert parse_kv((tmp_path / f"ev_{name}" / "eval.txt").read_text()) == results[name]
    assert results["q8"]["weights_kind"] == "q8"
    for key in ("accuracy", "precision", "recall", "f1", "iou", "tp", "fp", "tn", "fn", "bce"):
        assert key in results["float"]

    rc, _, err = run(capsys, "bench", "--weights", q, "--frames", 5)
    assert rc == EXIT_USAGE
    rc, out, _ = run(capsys, "bench", "--weights", q, "--frames", 10, "--threads", 1, "--out", tmp_path / "b")
    assert rc == 0
    kv = parse_kv(out)
    assert kv["thread_count"] == "1" and kv["n_frames"] == "10"
    for key in ("fps", "baseline_fps", "speedup_ratio", "model_file_bytes", "baseline_bytes",
                "size_reduction_ratio"):
        assert float(kv[key]) > 0
    assert float(kv["size_reduction_ratio"]) >= 7.0
    assert (tmp_path / "b" / "bench.png").stat().st_size > 0


def test_bad_weight_file_is_io_error(tmp_path, corpus, capsys):
    (tmp_path / "junk.sseg").write_bytes(b"nonsense")
    img = next((corpus / "images").glob("*.pgm"))
    rc, _, _ = run(capsys, "infer", "--weights", tmp_path / "junk.sseg", "--out", tmp_path / "o", img)
    assert rc == EXIT_IO


def test_resume_starts_from_lower_loss(tmp_path, corpus, capsys):
    common = ["--data", corpus, "--split", 1.0, "--seed", 2]
    assert run(capsys, "train", *common, "--out", tmp_path / "warm", "--epochs", 12, "--lr", 1e-3)[0] == 0
    assert run(capsys, "train", *common, "--out", tmp_path / "fresh", "--epochs", 1)[0] == 0
    assert run(capsys, "train", *common, "--out", tmp_path / "resumed", "--epochs", 1,
               "--resume", tmp_path / "warm" / "final.sseg")[0] == 0
    fresh = read_log(tmp_path / "fresh" / "train.log")[0][1]
    resumed = read_log(tmp_path / "resumed" / "train.log")[0][1]
    assert resumed < fresh
