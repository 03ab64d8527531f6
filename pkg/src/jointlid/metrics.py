"""Error rate, per-language P/R/F1, confusion matrix, masking sweeps and embedding export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import Dataset
from .features import FeatureSequence, normalize_features, repeat_pad
from .model import predict_proba
from .trainer import Checkpoint

SWEEP_SPANS = (0, 80, 160, 240, 320, 400, 480)
SWEEP_COLUMNS = ("mode", "span_ms", "seed", "error_rate", "pseudo_label_acc")


@dataclass
class LanguageScore:
    code: str
    f1: float
    precision: float
    recall: float
    support: int


@dataclass
class EvalReport:
    error_rate: float
    per_language: list[LanguageScore]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows: reference, columns: prediction
    num_utts: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "error_rate": self.error_rate,
            "per_language": [asdict(s) for s in self.per_language],
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "confusion": self.confusion.tolist(),
            "num_utts": self.num_utts,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def report_from_predictions(labels, predictions, languages: Sequence[str], config: dict | None = None) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    n = len(languages)
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (labels, predictions), 1)
    scores = []
    for i, code in enumerate(languages):
        tp = conf[i, i]
        col, row = conf[:, i].sum(), conf[i, :].sum()
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        scores.append(LanguageScore(code, f1_score(p, r), float(p), float(r), int(row)))
    total = int(conf.sum())
    return EvalReport(
        error_rate=1.0 - float(np.trace(conf)) / total if total else 0.0,
        per_language=scores,
        macro_precision=float(np.mean([s.precision for s in scores])),
        macro_recall=float(np.mean([s.recall for s in scores])),
        macro_f1=float(np.mean([s.f1 for s in scores])),
        confusion=conf,
        num_utts=total,
        config=config or {},
    )


def _inference_inputs(ckpt: Checkpoint, feats: list[FeatureSequence]) -> list[np.ndarray]:
    need = ckpt.feature_config.crop_frames
    return [normalize_features(repeat_pad(f, need), ckpt.stats).frames for f in feats]


def _check_inventory(ckpt: Checkpoint, ds: Dataset) -> None:
    if list(ckpt.languages) != list(ds.languages):
        raise ValueError(f"checkpoint languages {ckpt.languages} do not match evaluation set {ds.languages}")


def infer(ckpt: Checkpoint, ds: Dataset, features: list[FeatureSequence] | None = None, batch_size: int = 16):
    """Unmasked forward pass; returns (posteriors (n, N), pooled embeddings (n, dim)).

    Utterances are batched only with others of identical length, in
    dataset order, so results do not depend on batch composition order.
    """
    _check_inventory(ckpt, ds)
    if features is None:
        features = ds.features(ckpt.feature_config)
    xs = _inference_inputs(ckpt, features)
    cfg = ckpt.encoder_config
    probs = np.zeros((len(xs), len(ckpt.languages)), dtype=np.float32)
    embs = np.zeros((len(xs), cfg.dim), dtype=np.float32)
    by_len: dict[int, list[int]] = {}
    for i, x in enumerate(xs):
        by_len.setdefault(x.shape[0], []).append(i)
    for idx in by_len.values():
        for k in range(0, len(idx), batch_size):
            chunk = idx[k:k + batch_size]
            p, e = predict_proba(ckpt.params, np.stack([xs[i] for i in chunk]), cfg)
            probs[chunk], embs[chunk] = p, e
    return probs, embs


def evaluate(ckpt: Checkpoint, ds: Dataset, features: list[FeatureSequence] | None = None) -> EvalReport:
    probs, _ = infer(ckpt, ds, features)
    return report_from_predictions(ds.labels, probs.argmax(axis=1), ds.languages, ckpt.config)


def f1_table(report: EvalReport) -> str:
    lines = [f"{'lang':<10}{'F1':>8}{'P':>8}{'R':>8}{'n':>6}"]
    for s in report.per_language:
        lines.append(f"{s.code:<10}{s.f1:8.4f}{s.precision:8.4f}{s.recall:8.4f}{s.support:6d}")
    lines.append(
        f"{'Avg':<10}{report.macro_f1:8.4f}{report.macro_precision:8.4f}{report.macro_recall:8.4f}{report.num_utts:6d}"
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    mode: str  # "joint" or "supervised"
    span_ms: int
    seed: int
    error_rate: float
    pseudo_label_acc: float | None


def sweep_plan(spans: Sequence[int], seeds: Sequence[int]) -> list[tuple[str, int, int]]:
    """(mode, span, seed) runs; span 0 is only meaningful without the masked loss."""
    runs = []
    for seed in seeds:
        for span in spans:
            runs.append(("supervised", span, seed))
            if span > 0:
                runs.append(("joint", span, seed))
    return runs


def masking_sweep(
    train_fn: Callable[[str, int, int], tuple[float, float | None]],
    spans: Sequence[int] = SWEEP_SPANS,
    seeds: Sequence[int] = (0,),
) -> list[SweepRow]:
    """``train_fn(mode, span_ms, seed) -> (error_rate, pseudo_label_acc)``."""
    return [SweepRow(mode, span, seed, *train_fn(mode, span, seed)) for mode, span, seed in sweep_plan(spans, seeds)]


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        acc = "" if r.pseudo_label_acc is None else repr(r.pseudo_label_acc)
        w.writerow([r.mode, r.span_ms, r.seed, repr(r.error_rate), acc])
    return buf.getvalue()


def export_embeddings(ckpt: Checkpoint, ds: Dataset, path: str | Path, features=None) -> int:
    """CSV rows of (utterance id, language code, pooled encoder output); returns the row count."""
    _, embs = infer(ckpt, ds, features)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["uid", "lang"] + [f"e{i}" for i in range(embs.shape[1])])
    for u, e in zip(ds.utterances, embs):
        w.writerow([u.uid, ds.languages[u.lang]] + [repr(float(v)) for v in e])
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return len(ds)
