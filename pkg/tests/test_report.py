import csv

import numpy as np

from fetalseg.infer_eval import evaluate_cases
from fetalseg.report import render_evaluation, render_run
from fetalseg.train import RunRecord
from fetalseg.volume_io import LabelVolume
from synthdata import synth_protocol

PNG_MAGIC = b"\x89PNG"


def _report():
    rng = np.random.default_rng(0)
    gt = {}
    pred = {}
    for case in ("a", "b", "c"):
        labels = rng.integers(0, 4, size=(6, 6, 6))
        noisy = labels.copy()
        noisy[rng.random((6, 6, 6)) < 0.1] = 0
        gt[case] = LabelVolume(labels, (1, 1, 1), np.eye(4))
        pred[case] = LabelVolume(noisy, (1, 1, 1), np.eye(4))
    return evaluate_cases(pred, gt, synth_protocol())


def test_render_evaluation_outputs(tmp_path):
    paths = render_evaluation(_report(), tmp_path)
    with open(paths["table"], newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 * 4  # cases x classes
    assert set(rows[0]) == {"case_id", "class_id", "class_name", "dice", "absent"}
    for row in rows:
        assert 0.0 <= float(row["dice"]) <= 1.0

    summary = paths["summary"].read_text()
    assert "mean" in summary and "shell" in summary
    assert paths["figure"].read_bytes()[:4] == PNG_MAGIC


def test_summary_lists_unpaired(tmp_path):
    report = _report()
    report.unpaired = ["zz"]
    paths = render_evaluation(report, tmp_path)
    assert "zz" in paths["summary"].read_text()


def test_render_run_outputs(tmp_path):
    record = RunRecord(
        train_loss=[2.0, 1.5, 1.2],
        val_loss=[2.1, 1.7, float("nan")],
        lr=[0.01, 0.008, 0.005],
    )
    paths = render_run(record, tmp_path, run_name="toy")
    with open(paths["log"], newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]
    assert rows[2]["val_loss"] == ""
    assert paths["figure"].read_bytes()[:4] == PNG_MAGIC
