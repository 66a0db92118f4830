import os
import struct

import numpy as np
import pandas as pd
import pytest
from PIL import Image

import metrics_analyzer
import tensor_store
from chart_generator import ChartGenerator, save_grid, tile_grid
from config import load_config_file, merge_overrides, setup_logging
from errors import ConfigError, DimensionError, FormatError


# -------------------------------------------------------- tensor store

def test_tensor_widths(tmp_path, rng):
    a = rng.standard_normal((3, 4))
    tensor_store.write_tensor(str(tmp_path / "a8"), a, width=8)
    tensor_store.write_tensor(str(tmp_path / "a4"), a, width=4)
    assert np.array_equal(tensor_store.read_tensor(str(tmp_path / "a8")), a)
    assert np.allclose(tensor_store.read_tensor(str(tmp_path / "a4")), a, atol=1e-6)
    assert os.path.getsize(tmp_path / "a4") == 16 + 2 * 8 + 12 * 4


def test_tensor_truncated(tmp_path):
    path = tmp_path / "t"
    tensor_store.write_tensor(str(path), np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        tensor_store.read_tensor(str(path))


def test_tensor_bad_width(tmp_path):
    path = tmp_path / "t"
    path.write_bytes(struct.pack("<QQ", 1, 2) + struct.pack("<Q", 1) + b"\0\0")
    with pytest.raises(FormatError) as excinfo:
        tensor_store.read_tensor(str(path))
    assert excinfo.value.offset == 8
    with pytest.raises(ValueError):
        tensor_store.write_tensor(str(path), np.ones(2), width=2)


def test_missing_tensor_file(tmp_path):
    registry = tensor_store.save_tensors(str(tmp_path), {"a": np.ones(2)})
    os.remove(tmp_path / "a.bin")
    with pytest.raises(FileNotFoundError):
        tensor_store.load_tensors(str(tmp_path), registry)


# -------------------------------------------------------------- config

def test_toml_config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('model = "cstvae"\nmax-steps = 10\ntie_layers = true\n')
    assert load_config_file(str(path)) == {"model": "cstvae", "max_steps": 10, "tie_layers": True}


def test_env_style_config(tmp_path):
    path = tmp_path / "exp.env"
    path.write_text("MODEL=stvae\nLEARNING_RATE=0.05\n")
    assert load_config_file(str(path)) == {"model": "stvae", "learning_rate": "0.05"}


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "missing.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("model = \n")
    with pytest.raises(ConfigError):
        load_config_file(str(bad))
    with pytest.raises(ConfigError):
        setup_logging("CHATTY", "")


def test_merge_overrides():
    merged = merge_overrides({"model": "vae", "seed": 1}, {"model": "stvae", "seed": None})
    assert merged == {"model": "stvae", "seed": 1}


def test_python_floor_documented():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for name in ("requirements.txt", "README.md", "QUICK_START.md"):
        with open(os.path.join(root, name), encoding="utf-8") as f:
            assert "3.11" in f.read(), name


# ------------------------------------------------------------ analysis

def write_metrics(run_dir, rows):
    os.makedirs(run_dir, exist_ok=True)
    pd.DataFrame(rows, columns=["step", "split", "elbo_per_example", "kl_total", "loglik", "skips"]) \
        .to_csv(os.path.join(run_dir, "metrics.csv"), index=False)


def test_compare_runs(tmp_path):
    write_metrics(tmp_path / "a", [(1, "train", -90.0, 5.0, -85.0, 0), (1, "test", -95.0, 5.0, -90.0, 0),
                                   (2, "train", -80.0, 6.0, -74.0, 0), (2, "test", -85.0, 6.0, -79.0, 1)])
    write_metrics(tmp_path / "b", [(1, "train", -70.0, 5.0, -65.0, 0), (1, "test", -75.0, 5.0, -70.0, 0)])
    df = metrics_analyzer.compare_runs([str(tmp_path / "a"), str(tmp_path / "b")])
    assert list(df["run"]) == ["b", "a"]
    a = df.iloc[1]
    assert a["final_test_elbo"] == -85.0
    assert a["best_test_elbo"] == -85.0
    assert a["final_train_elbo"] == -80.0
    assert a["steps"] == 2
    assert a["skips"] == 1


def test_generate_report(tmp_path, capsys):
    write_metrics(tmp_path / "a", [(1, "test", -95.0, 5.0, -90.0, 0)])
    df = metrics_analyzer.generate_report([str(tmp_path / "a")])
    assert len(df) == 1
    assert "-95.000" in capsys.readouterr().out


def test_missing_metrics(tmp_path):
    with pytest.raises(FileNotFoundError):
        metrics_analyzer.load_run_metrics(str(tmp_path))


# -------------------------------------------------------------- images

def test_tile_grid_layout():
    images = np.zeros((2, 3, 4, 5))
    images[1, 2] = 1.0
    canvas = tile_grid(images)
    assert canvas.shape == (2 * 5 - 1, 3 * 6 - 1)
    assert canvas[4, 0] == 128
    assert canvas[5:, 12:].min() == 255
    with pytest.raises(DimensionError):
        tile_grid(np.zeros((3, 4, 5)))


def test_save_grid(tmp_path, rng):
    images = rng.uniform(size=(2, 2, 6, 6))
    png, pgm = save_grid(images, str(tmp_path / "out" / "grid"))
    with Image.open(png) as img:
        assert img.size == (13, 13)
        assert img.mode == "L"
    raw = open(pgm, "rb").read()
    assert raw.startswith(b"P5\n13 13\n255\n")
    assert len(raw) == len(b"P5\n13 13\n255\n") + 13 * 13
    png2, _ = save_grid(images, str(tmp_path / "again"))
    assert open(png, "rb").read() == open(png2, "rb").read()


def test_learning_curves(tmp_path):
    frame = pd.DataFrame({"step": [1, 2, 2], "split": ["train", "train", "test"],
                          "elbo_per_example": [-90.0, -80.0, -85.0]})
    chart = ChartGenerator(str(tmp_path)).generate_learning_curves({"stvae": frame})
    assert chart is not None and os.path.exists(chart)
    assert ChartGenerator(str(tmp_path)).generate_learning_curves({"empty": frame.iloc[0:0]}) is None
