import gzip
import struct

import numpy as np
import pytest

from cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture
def mnist_dir(tmp_path):
    """Tiny IDX files with MNIST's standard names"""
    rng = np.random.default_rng(0)
    directory = tmp_path / "mnist"
    directory.mkdir()
    for stem, n in (("train", 20), ("t10k", 10)):
        images = np.where(rng.uniform(size=(n, 6, 6)) < 0.4, 255, 0).astype(np.uint8)
        raw = struct.pack(">IIII", 0x803, n, 6, 6) + images.tobytes()
        (directory / f"{stem}-images-idx3-ubyte.gz").write_bytes(gzip.compress(raw))
        labels = (np.arange(n) % 10).astype(np.uint8)
        (directory / f"{stem}-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
    return directory


def test_no_arguments():
    assert main([]) == EXIT_USAGE


def test_unknown_flag():
    assert main(["train", "--bogus"]) == EXIT_USAGE


def test_train_needs_data():
    assert main(["train"]) == EXIT_USAGE


def test_config_command(capsys):
    assert main(["config"]) == EXIT_OK
    assert "Configuration Summary" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "tensor_core"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out


def test_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere")]) == EXIT_RUNTIME


def test_bad_config_file(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('model = "gan"\n')
    assert main(["train", "--data", str(tmp_path), "--config", str(path)]) == EXIT_USAGE


def test_end_to_end(tmp_path, mnist_dir, capsys):
    data = tmp_path / "translated"
    run = tmp_path / "run"
    assert main(["dataset", "build", "--kind", "translated", "--mnist-dir", str(mnist_dir),
                 "--canvas", "8", "--seed", "1", "--out", str(data)]) == EXIT_OK

    train = ["train", "--data", str(data), "--model", "stvae", "--steps", "2", "--batch-size", "5",
             "--content-dim", "2", "--pose-dim", "3", "--content-hidden", "8", "--pose-hidden", "4",
             "--eval-every", "1", "--eval-examples", "5", "--checkpoint-every", "1",
             "--seed", "1", "--out", str(run), "--no-progress"]
    assert main(train) == EXIT_OK
    checkpoint = run / "checkpoints" / "step_00000002"
    assert (checkpoint / "manifest.json").exists()

    report = tmp_path / "accuracy.csv"
    assert main(["eval", "classify", "--data", str(data), "--features", "stvae", "--checkpoint",
                 str(checkpoint), "--epochs", "1", "--hidden", "4", "--out", str(report)]) == EXIT_OK
    assert report.read_text().splitlines()[0] == "model,input_kind,train_acc,test_acc,seed"
    assert main(["eval", "classify", "--data", str(data), "--features", "vae", "--checkpoint",
                 str(checkpoint), "--epochs", "1"]) == EXIT_USAGE

    charts = tmp_path / "charts"
    assert main(["render", "--mode", "samples", "--checkpoint", str(checkpoint), "--n", "2",
                 "--out", str(charts)]) == EXIT_OK
    assert (charts / "samples.png").exists()
    assert main(["render", "--mode", "decomposition", "--checkpoint", str(checkpoint),
                 "--data", str(data), "--n", "2", "--out", str(charts)]) == EXIT_OK

    capsys.readouterr()
    assert main(["elbo", "report", str(run), "--chart", "--out", str(charts)]) == EXIT_OK
    assert "stvae" in capsys.readouterr().out
    assert (charts / "learning_curves.png").exists()


def test_resume_from_checkpoint(tmp_path, mnist_dir):
    data = tmp_path / "mnist_set"
    assert main(["dataset", "build", "--kind", "mnist", "--mnist-dir", str(mnist_dir),
                 "--out", str(data)]) == EXIT_OK
    common = ["--data", str(data), "--no-progress"]
    assert main(["train", *common, "--model", "vae", "--steps", "1", "--batch-size", "5",
                 "--content-dim", "2", "--content-hidden", "8", "--checkpoint-every", "1",
                 "--out", str(tmp_path / "run")]) == EXIT_OK
    checkpoint = tmp_path / "run" / "checkpoints" / "step_00000001"
    assert main(["train", *common, "--checkpoint", str(checkpoint), "--steps", "2",
                 "--out", str(tmp_path / "resumed")]) == EXIT_OK
    assert (tmp_path / "resumed" / "checkpoints" / "step_00000002").exists()


def test_decomposition_commands(tmp_path, mnist_dir, capsys):
    data = tmp_path / "superimposed"
    assert main(["dataset", "build", "--kind", "superimposed", "--mnist-dir", str(mnist_dir), "--canvas", "8",
                 "--n-train", "10", "--n-test", "6", "--seed", "3", "--out", str(data)]) == EXIT_OK
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--model", "cstvae", "--layers", "2", "--steps", "1",
                 "--batch-size", "5", "--content-dim", "2", "--pose-dim", "3", "--content-hidden", "8",
                 "--pose-hidden", "4", "--eval-examples", "5", "--checkpoint-every", "1",
                 "--out", str(run), "--no-progress"]) == EXIT_OK
    checkpoint = str(run / "checkpoints" / "step_00000001")

    report = tmp_path / "decomposition.csv"
    capsys.readouterr()
    assert main(["eval", "decompose", "--data", str(data), "--checkpoint", checkpoint,
                 "--limit", "4", "--out", str(report)]) == EXIT_OK
    assert f"\n{checkpoint},test,4," in capsys.readouterr().out
    assert report.read_text().splitlines()[0] == "checkpoint,split,examples,layer_mae"

    generated = tmp_path / "generated"
    assert main(["dataset", "build", "--kind", "generated", "--checkpoint", checkpoint,
                 "--n-train", "4", "--n-test", "3", "--out", str(generated)]) == EXIT_OK
    assert main(["eval", "decompose", "--data", str(generated), "--checkpoint", checkpoint,
                 "--out", str(report)]) == EXIT_OK
    rows = report.read_text().splitlines()
    assert len(rows) == 3 and rows[2].split(",")[2] == "3"


def test_decomposition_needs_layered_model(tmp_path, mnist_dir):
    data = tmp_path / "mnist_set"
    assert main(["dataset", "build", "--kind", "mnist", "--mnist-dir", str(mnist_dir),
                 "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--model", "vae", "--steps", "1", "--batch-size", "5",
                 "--content-dim", "2", "--content-hidden", "8", "--checkpoint-every", "1",
                 "--out", str(tmp_path / "run"), "--no-progress"]) == EXIT_OK
    checkpoint = str(tmp_path / "run" / "checkpoints" / "step_00000001")
    assert main(["eval", "decompose", "--data", str(data), "--checkpoint", checkpoint]) == EXIT_USAGE
    assert main(["dataset", "build", "--kind", "generated", "--checkpoint", checkpoint,
                 "--out", str(tmp_path / "g")]) == EXIT_USAGE
    assert main(["dataset", "build", "--kind", "generated", "--out", str(tmp_path / "g")]) == EXIT_USAGE
