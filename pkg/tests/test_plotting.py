import matplotlib.image as mpimg
import numpy as np
import pytest

from recvarnet.plotting import comparison_panel, default_zoom_box, mask_figure, training_curve


def test_zoom_box_centered():
    assert default_zoom_box((100, 60)) == (35, 21, 30, 18)
    assert default_zoom_box((8, 8)) == (2, 2, 4, 4)


def test_comparison_panel(tmp_path, rng):
    images = {"reference": rng.random((32, 32)), "zero-filled": rng.random((32, 32)), "model": rng.random((32, 32))}
    path = comparison_panel(images, tmp_path / "sub" / "panel.png", title="t")
    pixels = mpimg.imread(path)
    # three columns are wider than two rows are tall
    assert pixels.shape[1] > pixels.shape[0]


def test_comparison_panel_empty(tmp_path):
    with pytest.raises(ValueError):
        comparison_panel({}, tmp_path / "x.png")


def test_mask_figure(tmp_path):
    assert mask_figure(np.eye(16, dtype=bool), tmp_path / "m.png", title="mask").stat().st_size > 0


def test_training_curve(tmp_path):
    log = tmp_path / "metrics.tsv"
    log.write_text("iteration\tloss\tssim_R5\tssim_R10\tssim_mean\n10\t0.5\t0.7\t0.6\t0.65\n20\t0.4\t0.8\t0.7\t0.75\n")
    assert training_curve(log, tmp_path / "curve.png").stat().st_size > 0
