from pathlib import Path

import numpy as np
import pytest

from stic.cli import BACKGROUND, PALETTE, boundary_map, run
from stic.io import read_pnm, save_checkpoint
from stic.models import cnn, mlp

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
FAST = ["--set", "passes=1", "--set", "iterations_per_pass=30", "--set", "synth_steps=10"]


def linear_model(w, b):
    """Two real classes split by the line w . x + b = 0; the fake class never wins."""
    m = mlp(2, 2, hidden=())
    W = np.zeros((2, 3))
    W[:, 0] = w
    m.params["fc0.w"].data = W
    m.params["fc0.b"].data = np.array([b, 0.0, -1e6])
    return m


def analytic_classes(w, b, bounds, res):
    lo, hi = bounds
    centres = lo + (np.arange(res) + 0.5) * (hi - lo) / res
    gx, gy = np.meshgrid(centres, centres[::-1])
    side = w[0] * gx + w[1] * gy + b
    return np.where(side > 0, 0, 1), np.abs(side) / np.linalg.norm(w)


def decode_ppm(path):
    raw = Path(path).read_bytes()
    head, body = raw.split(b"\n255\n", 1)
    w, h = (int(v) for v in head.split()[1:3])
    rgb = np.frombuffer(body, np.uint8).reshape(h, w, 3)
    classes = np.full((h, w), -1)
    for c, colour in enumerate(PALETTE):
        classes[(rgb == colour).all(-1)] = c
    classes[(rgb == BACKGROUND).all(-1)] = 99
    return classes


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = run(["train", "--config", str(CONFIGS / "toy.cfg"), "--seed", "3", "--out", str(out)] + FAST)
    assert code == 0
    return out


def test_train_writes_metrics_checkpoint_manifest(toy_run):
    assert (toy_run / "pass1.stic").exists()
    assert (toy_run / "metrics.csv").read_text().startswith("pass,iter,loss,train_acc,mean_fake_prob")
    manifest = (toy_run / "manifest.txt").read_text()
    assert "command = train" in manifest and "seed = 3" in manifest
    assert any(line.startswith("file = pass1.stic ") for line in manifest.splitlines())


def test_train_is_deterministic(toy_run, tmp_path):
    assert run(["train", "--config", str(CONFIGS / "toy.cfg"), "--seed", "3", "--out", str(tmp_path)] + FAST) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (toy_run / "metrics.csv").read_bytes()
    assert (tmp_path / "pass1.stic").read_bytes() == (toy_run / "pass1.stic").read_bytes()


def test_sample_writes_requested_count(toy_run, tmp_path):
    ck = str(toy_run / "pass1.stic")
    args = ["sample", "--config", str(CONFIGS / "toy.cfg"), "--ckpt", ck, "--class", "1", "--n", "7", "--out", str(tmp_path)]
    assert run(args + FAST) == 0
    rows = (tmp_path / "samples.csv").read_text().splitlines()
    assert rows[0] == "x,y" and len(rows) == 8


def test_sample_images_write_grids(tmp_path):
    save_checkpoint(tmp_path / "c.stic", cnn((1, 8, 8), 3, channels=(4, 4), seed=0))
    out = tmp_path / "out"
    assert run(["sample", "--ckpt", str(tmp_path / "c.stic"), "--class", "2", "--n", "4", "--out", str(out), "--set", "steps=2"]) == 0
    names = sorted(p.name for p in out.glob("*.pgm"))
    assert names == ["class2_000.pgm", "class2_001.pgm", "class2_002.pgm", "class2_003.pgm", "class2_grid.pgm"]
    assert read_pnm(out / "class2_000.pgm").shape == (8, 8)


def test_interpolate_endpoints(toy_run, tmp_path):
    ck = str(toy_run / "pass1.stic")
    args = ["interpolate", "--ckpt", ck, "--class", "0", "--to-class", "2", "--n", "5", "--out", str(tmp_path)]
    assert run(args + FAST) == 0
    assert len((tmp_path / "interpolation.csv").read_text().splitlines()) == 6


def test_eval_appends_all_metrics(toy_run, tmp_path):
    ck = str(toy_run / "pass1.stic")
    args = ["eval", "--config", str(CONFIGS / "toy.cfg"), "--ckpt", ck, "--out", str(tmp_path)]
    assert run(args + FAST + ["--set", "eval_epochs=2", "--set", "samples_per_class=8"]) == 0
    metrics = [line.split(",")[1] for line in (tmp_path / "eval.csv").read_text().splitlines()[1:]]
    assert metrics == ["cls_r", "cls_g", "frechet", "precision", "recall"]


@pytest.mark.parametrize("w,b", [((1.0, 0.0), 0.0), ((1.0, 2.0), 0.3), ((-0.4, 1.0), -0.7)])
def test_boundary_map_matches_half_plane(w, b):
    w = np.array(w)
    bounds, res = (-2.0, 2.0), 64
    got = boundary_map(linear_model(w, b), bounds, res)
    want, dist = analytic_classes(w, b, bounds, res)
    cell = (bounds[1] - bounds[0]) / res
    assert np.all(dist[got != want] <= cell)


def test_boundary_viz_command(tmp_path):
    w, b = np.array([0.6, -1.0]), 0.2
    save_checkpoint(tmp_path / "lin.stic", linear_model(w, b))
    out = tmp_path / "viz"
    assert run(["boundary-viz", "--ckpt", str(tmp_path / "lin.stic"), "--grid", "50", "--bounds=-1,1", "--out", str(out)]) == 0
    got = decode_ppm(out / "boundary.ppm")
    want, dist = analytic_classes(w, b, (-1.0, 1.0), 50)
    assert np.all(dist[got != want] <= 2.0 / 50)


def test_boundary_map_rejects_images():
    with pytest.raises(ValueError):
        boundary_map(cnn((1, 8, 8), 3), (-1, 1), 4)


def test_exit_codes(tmp_path, capsys):
    assert run([]) == 1
    assert run(["train"]) == 1
    assert run(["bogus"]) == 1
    assert run(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert run(["sample", "--set", "nope=1"]) == 1
    assert run(["sample", "--out", str(tmp_path)]) == 1
    (tmp_path / "junk.stic").write_bytes(b"garbage")
    assert run(["sample", "--ckpt", str(tmp_path / "junk.stic"), "--class", "0", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "needs --config" in err and "magic" in err
