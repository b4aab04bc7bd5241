import numpy as np

from speakervc.evaluation import compute_eer
from speakervc.plots import plot_det, plot_losses


def test_det_svg_is_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    s = np.r_[rng.normal(1, 1, 50), rng.normal(0, 1, 150)]
    y = [1] * 50 + [0] * 150
    eer = plot_det(s, y, tmp_path / "a.svg")
    plot_det(s, y, tmp_path / "b.svg")
    assert eer == compute_eer(s, y)[0]
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.lstrip().startswith(b"<?xml") and b"<svg" in a


def test_loss_svg(tmp_path):
    plot_losses({"stage 1": [3.0, 2.0, 1.5], "stage 3": [1.4, 1.3]}, tmp_path / "l.svg")
    plot_losses({"stage 1": [3.0, 2.0, 1.5], "stage 3": [1.4, 1.3]}, tmp_path / "m.svg")
    assert (tmp_path / "l.svg").read_bytes() == (tmp_path / "m.svg").read_bytes()


def test_empty_history_rejected(tmp_path):
    import pytest

    with pytest.raises(ValueError):
        plot_losses({}, tmp_path / "x.svg")
