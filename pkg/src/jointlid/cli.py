"""Command-line entry point: synth, train, eval, sweep, gradcheck, quantize.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Errors are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .datasets import Dataset, ManifestError, generate_synthetic, load_manifest, split, write_corpus
from .features import FeatureStats, logmel, normalize_features, read_wav
from .metrics import evaluate, export_embeddings, f1_table, masking_sweep, sweep_csv
from .model import gradcheck_model
from .rpq import init_quantizer, quantize, stack_frames
from .trainer import load_checkpoint, save_checkpoint, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("jointlid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# data


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.manifest:
        full = load_manifest(d.manifest)
        if d.eval_manifest:
            ev = load_manifest(d.eval_manifest)
            if ev.languages != full.languages:
                raise ManifestError(f"eval languages {ev.languages} differ from training languages {full.languages}")
            return full, ev
    else:
        s = d.synthetic
        full = generate_synthetic(s.num_langs, s.utts_per_lang, s.duration_s, s.seed).dataset
    return split(full, d.train_frac, d.split_seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_training(cfg: RunConfig, train_set: Dataset, verbose: bool = False):
    def on_step(rec):
        if verbose and (rec["step"] % 50 == 0 or rec["step"] == 1):
            log.info("step %d L=%.4f", rec["step"], rec["L"])

    return train(
        train_set, cfg.encoder, cfg.masking, cfg.train, cfg.quantizer, cfg.features, on_step=on_step
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    s = cfg.data.synthetic
    corpus = generate_synthetic(s.num_langs, s.utts_per_lang, s.duration_s, s.seed)
    out = Path(args.out)
    manifest = write_corpus(corpus.dataset, out)
    _write_json(out / "config.json", cfg.to_dict())
    print(manifest)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, ev = load_data(cfg)
    result = run_training(cfg, tr, args.verbose)
    save_checkpoint(out / "model.ckpt", result.checkpoint)
    write_log(out / "train_log.jsonl", result.log)
    report = evaluate(result.checkpoint, ev)
    _write_json(out / "validation.json", report.to_dict())
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "validation_error_rate": report.error_rate}))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, ev = load_data(cfg)
    report = evaluate(ckpt, ev)
    if args.report:
        _write_json(Path(args.report), report.to_dict())
    if args.embeddings:
        export_embeddings(ckpt, ev, args.embeddings)
    print(f"error_rate={report.error_rate:.6f}")
    print(f1_table(report))
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    tr, ev = load_data(cfg)
    feats = tr.features(cfg.features)
    eval_feats = ev.features(cfg.features)
    steps_per_epoch = -(-len(tr) // cfg.train.batch_size)

    def train_fn(mode, span, seed):
        lam = cfg.train.lam if mode == "joint" else 0.0
        tcfg = replace(cfg.train, lam=lam, seed=seed)
        mcfg = replace(cfg.masking, span_ms=span)
        res = train(tr, cfg.encoder, mcfg, tcfg, cfg.quantizer, cfg.features, features=feats)
        err = evaluate(res.checkpoint, ev, eval_feats).error_rate
        log.info("sweep mode=%s span=%d seed=%d error=%.4f", mode, span, seed, err)
        return err, res.final_epoch_pseudo_acc(steps_per_epoch)

    rows = masking_sweep(train_fn, cfg.sweep.spans, cfg.sweep.seeds)
    text = sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    n = cfg.data.synthetic.num_langs
    report = gradcheck_model(
        cfg.encoder,
        n,
        cfg.quantizer.size,
        batch=args.batch,
        frames=args.frames,
        seed=cfg.train.seed,
        lam=cfg.train.lam,
        span_ms=cfg.masking.span_ms,
        max_per_param=args.per_param,
    )
    print(report.summary())
    for p in report.failures:
        print(f"  {p.name}{list(p.worst_index)}: analytic={p.analytic:.6e} numeric={p.numeric:.6e} rel={p.max_rel_err:.3e}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_quantize(args, cfg: RunConfig) -> int:
    wave = read_wav(args.audio)
    feats = logmel(wave, cfg.features)
    s = cfg.encoder.sub_sampling_factor
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        q, stats = ckpt.quantizer, ckpt.stats
    else:
        q = init_quantizer(cfg.quantizer.dim, cfg.quantizer.size, cfg.features.n_mels * s, cfg.train.seed)
        stats = FeatureStats.from_sequences([feats])
    labels = quantize(stack_frames(normalize_features(feats, stats).frames, s), q)
    record = {"audio": str(args.audio), "num_frames": feats.num_frames, "labels": labels.tolist()}
    print(json.dumps(record))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointlid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration (JSON); defaults apply when omitted")
        sp.set_defaults(fn=fn)
        return sp

    add("synth", cmd_synth, "write the synthetic corpus as WAV files plus a manifest").add_argument(
        "--out", required=True
    )
    add("train", cmd_train, "train a model and write checkpoint, log and validation report").add_argument("--out")
    ev = add("eval", cmd_eval, "evaluate a checkpoint on the evaluation split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--report", help="write the EvalReport JSON here")
    ev.add_argument("--embeddings", help="also export pooled embeddings as CSV")
    add("sweep", cmd_sweep, "masking-span sweep; writes CSV").add_argument("--out")
    gc = add("gradcheck", cmd_gradcheck, "finite-difference check of the joint loss")
    gc.add_argument("--batch", type=int, default=2)
    gc.add_argument("--frames", type=int, default=32)
    gc.add_argument("--per-param", type=int, default=4, help="coordinates checked per parameter")
    qz = add("quantize", cmd_quantize, "dump pseudo-labels for one WAV file")
    qz.add_argument("--audio", required=True)
    qz.add_argument("--checkpoint", help="use this checkpoint's quantizer and statistics")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    try:
        return args.fn(args, cfg)
    except (ManifestError, ValueError, OSError, FloatingPointError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
