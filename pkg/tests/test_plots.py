import numpy as np

from attrseq import plots


def test_loss_curves(tmp_path):
    out = tmp_path / "loss.png"
    plots.save_loss_curves({"rare_first": [(1, 2.0), (2, 1.5)], "random(3)": [(1, 2.1)]}, out)
    assert out.stat().st_size > 0


def test_metric_bars(tmp_path):
    out = tmp_path / "metrics.png"
    plots.save_metric_bars([("ensemble", (0.9, 0.8, 0.85, 0.82)),
                            ("member-average", (0.85, 0.7, 0.8, 0.75))], out)
    assert out.stat().st_size > 0


def test_per_attribute_ap(tmp_path):
    out = tmp_path / "ap.png"
    plots.save_per_attribute_ap([0.9, None, 0.4], ["a", "b", "c"], out)
    assert out.stat().st_size > 0


def test_attention_heatmap(tmp_path):
    out = tmp_path / "att.png"
    plots.save_attention_heatmap(np.random.default_rng(0).random((6, 4)), out, title="img-0")
    assert out.stat().st_size > 0


def test_comparison_bars(tmp_path):
    out = tmp_path / "cmp.png"
    plots.save_comparison_bars([("attention", {"full": 80.0, "ablated": 76.0}),
                                ("context", {"full": 80.0, "ablated": 79.0})], out,
                               ylabel="F1 (%)")
    assert out.stat().st_size > 0
