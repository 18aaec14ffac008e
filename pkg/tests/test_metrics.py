"""Hard-mask Dice fixtures and the metrics CSV round trip."""

import numpy as np
import pytest

from mstp.errors import ContractError
from mstp.metrics import CSV_HEADER, MetricsWriter, dsc, mean_class_dsc, read_metrics


def mask(shape, idxs):
    m = np.zeros(shape, bool)
    m.reshape(-1)[list(idxs)] = True
    return m


def test_dsc_identical_masks():
    m = mask((4, 4), [0, 5, 9])
    assert dsc(m, m) == 1.0


def test_dsc_disjoint_masks():
    assert dsc(mask((4, 4), [0, 1]), mask((4, 4), [2, 3])) == 0.0


def test_dsc_half_overlap():
    # |p| = 4, |g| = 4, overlap 2 -> 2*2/8 = 0.5 exactly
    assert dsc(mask((4, 4), [0, 1, 2, 3]), mask((4, 4), [2, 3, 4, 5])) == 0.5


def test_dsc_empty_vs_empty_is_perfect():
    z = np.zeros((3, 3, 3), bool)
    assert dsc(z, z) == 1.0


def test_dsc_empty_vs_nonempty_is_zero():
    z = np.zeros((3, 3), bool)
    assert dsc(z, mask((3, 3), [4])) == 0.0


def test_dsc_shape_mismatch():
    with pytest.raises(ContractError):
        dsc(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


def test_dsc_accepts_integer_masks():
    a = np.array([[1, 0], [1, 0]], np.uint8)
    assert dsc(a, a) == 1.0


def test_mean_class_dsc():
    assert mean_class_dsc({1: 0.5, 3: 1.0}) == pytest.approx(0.75)
    with pytest.raises(ContractError):
        mean_class_dsc({})


# ---------------------------------------------------------------------------
# CSV round trip


def test_metrics_roundtrip(tmp_path):
    path = tmp_path / "metrics.csv"
    w = MetricsWriter(path)
    w.write_epoch(1, "train", {1: 0.25, 2: 0.5}, dice_loss=0.75,
                  ce_loss=1.25, trainable_fraction=0.135491)
    w.write_epoch(2, "test", {1: 0.3}, dice_loss=0.6, ce_loss=None,
                  trainable_fraction=0.135491)

    rows = read_metrics(path)
    assert len(rows) == 3
    assert rows[0] == {"epoch": 1, "split": "train", "class_id": 1, "dsc": 0.25,
                       "dice_loss": 0.75, "ce_loss": 1.25,
                       "trainable_fraction": 0.135491}
    assert rows[2]["ce_loss"] is None
    assert rows[2]["split"] == "test"


def test_metrics_writer_appends_across_instances(tmp_path):
    path = tmp_path / "metrics.csv"
    MetricsWriter(path).write_epoch(1, "train", {1: 0.1}, 0.9, None, 0.5)
    MetricsWriter(path).write_epoch(2, "train", {1: 0.2}, 0.8, None, 0.5)
    rows = read_metrics(path)
    assert [r["epoch"] for r in rows] == [1, 2]


def test_read_metrics_rejects_foreign_header(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("epoch,loss\n1,0.5\n")
    with pytest.raises(ContractError):
        read_metrics(path)


def test_header_constant_is_the_documented_schema():
    assert CSV_HEADER == ("epoch", "split", "class_id", "dsc", "dice_loss",
                          "ce_loss", "trainable_fraction")
