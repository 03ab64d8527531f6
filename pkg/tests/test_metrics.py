import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointlid.datasets import generate_synthetic
from jointlid.encoder import EncoderConfig
from jointlid.masking import MaskConfig
from jointlid.metrics import (
    SWEEP_COLUMNS,
    SweepRow,
    evaluate,
    export_embeddings,
    f1_score,
    f1_table,
    masking_sweep,
    report_from_predictions,
    sweep_csv,
    sweep_plan,
)
from jointlid.trainer import QuantizerConfig, TrainConfig, load_checkpoint, save_checkpoint, train

LANGS = ["a", "b", "c", "d"]


class TestReport:
    def test_perfect(self):
        y = np.repeat(np.arange(4), 5)
        r = report_from_predictions(y, y, LANGS)
        assert r.error_rate == 0.0
        assert all(s.f1 == 1.0 for s in r.per_language)
        assert r.macro_f1 == 1.0

    def test_all_class_zero(self):
        y = np.repeat(np.arange(4), 5)
        r = report_from_predictions(y, np.zeros_like(y), LANGS)
        assert r.error_rate == pytest.approx(0.75)
        assert r.per_language[0].recall == 1.0
        assert r.per_language[0].precision == pytest.approx(0.25)
        assert r.per_language[1].f1 == 0.0 and r.per_language[1].precision == 0.0

    def test_f1_rule(self):
        assert f1_score(1.0, 1.0) == 1.0
        assert f1_score(1.0, 0.0) == 0.0
        assert f1_score(0.0, 0.0) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            report_from_predictions([0, 1], [0], LANGS)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_invariants(self, pairs):
        y, p = map(np.array, zip(*pairs))
        r = report_from_predictions(y, p, LANGS)
        assert r.confusion.sum() == r.num_utts == len(pairs)
        assert r.error_rate == pytest.approx(1 - np.trace(r.confusion) / r.num_utts)
        assert r.error_rate == pytest.approx(np.mean(y != p))
        for i, s in enumerate(r.per_language):
            assert 0 <= s.precision <= 1 and 0 <= s.recall <= 1 and 0 <= s.f1 <= 1
            row = r.confusion[i].sum()
            if row:
                assert s.recall == pytest.approx(r.confusion[i, i] / row)
        assert r.macro_f1 == pytest.approx(np.mean([s.f1 for s in r.per_language]))

    def test_two_class_accuracy(self):
        y = np.array([0, 0, 0, 1, 1, 1])
        p = np.array([0, 1, 0, 1, 1, 0])
        r = report_from_predictions(y, p, ["x", "y"])
        assert 1 - r.error_rate == pytest.approx(np.mean(y == p))

    def test_table(self):
        y = np.array([0, 1, 1])
        text = f1_table(report_from_predictions(y, y, ["en", "fr"]))
        lines = text.splitlines()
        assert len(lines) == 4
        assert lines[-1].startswith("Avg")

    def test_json(self):
        import json

        d = json.loads(report_from_predictions([0, 1], [0, 0], ["x", "y"], {"k": 1}).to_json())
        assert d["error_rate"] == 0.5 and d["confusion"] == [[1, 0], [1, 0]] and d["config"] == {"k": 1}


class TestSweep:
    def test_plan(self):
        plan = sweep_plan([0, 80, 160, 240, 320, 400, 480], [0])
        assert sum(m == "joint" for m, _, _ in plan) == 6
        assert sum(m == "supervised" for m, _, _ in plan) == 7
        assert ("joint", 0, 0) not in plan

    def test_sweep_and_csv(self):
        calls = []

        def fake(mode, span, seed):
            calls.append((mode, span, seed))
            return span / 1000, (None if mode == "supervised" else 0.5 - span / 1000)

        rows = masking_sweep(fake, [0, 80], [1, 2])
        assert len(rows) == len(calls) == 6
        parsed = list(csv.reader(io.StringIO(sweep_csv(rows))))
        assert tuple(parsed[0]) == SWEEP_COLUMNS
        assert parsed[1] == ["supervised", "0", "1", "0.0", ""]
        assert ["joint", "80", "1", "0.08", "0.42"] in parsed

    def test_csv_row(self):
        assert sweep_csv([SweepRow("joint", 80, 0, 0.25, 0.5)]).splitlines()[1] == "joint,80,0,0.25,0.5"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ds = generate_synthetic(3, 4, 1.0, seed=5).dataset
    res = train(
        ds,
        EncoderConfig(num_layers=1, dim=8, num_heads=2, conv_kernel=3),
        MaskConfig(),
        TrainConfig(total_steps=3, warmup_steps=1, batch_size=4),
        QuantizerConfig(size=16),
        features=ds.features(),
    )
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    save_checkpoint(path, res.checkpoint)
    return ds, res.checkpoint, path


class TestEvaluate:
    def test_report(self, trained):
        ds, ckpt, _ = trained
        r = evaluate(ckpt, ds)
        assert r.num_utts == len(ds)
        assert r.config["encoder"]["dim"] == 8

    def test_round_trip_exact(self, trained):
        ds, ckpt, path = trained
        a, b = evaluate(ckpt, ds), evaluate(load_checkpoint(path), ds)
        assert a.error_rate == b.error_rate
        np.testing.assert_array_equal(a.confusion, b.confusion)

    def test_inventory_mismatch(self, trained):
        ds, ckpt, _ = trained
        other = ds.subset(range(len(ds)))
        other.languages = ["x", "y", "z"]
        with pytest.raises(ValueError, match="do not match"):
            evaluate(ckpt, other)

    def test_embeddings(self, trained, tmp_path):
        ds, ckpt, _ = trained
        n = export_embeddings(ckpt, ds, tmp_path / "e.csv")
        rows = list(csv.reader((tmp_path / "e.csv").open()))
        assert n == len(ds) == len(rows) - 1
        assert all(len(r) == 8 + 2 for r in rows)
        export_embeddings(ckpt, ds, tmp_path / "f.csv")
        assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()

    def test_embeddings_unwritable(self, trained, tmp_path):
        ds, ckpt, _ = trained
        with pytest.raises(OSError):
            export_embeddings(ckpt, ds, tmp_path / "missing" / "e.csv")
