"""Labelled utterance collections: JSON-lines manifests and a synthetic corpus.

The synthetic corpus stands in for real multilingual speech.  Each
"language" draws units from a shared pool of 20 formant-like tones, but with
its own inventory and its own Markov transition statistics, so the class is
carried partly by which units occur and partly by the order they occur in.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .features import FeatureConfig, FeatureSequence, Waveform, logmel, read_wav, write_wav
from .seeding import substream

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
POOL_SIZE = 20


class ManifestError(ValueError):
    pass


@dataclass
class Utterance:
    uid: str
    lang: int
    waveform: Waveform | None = None
    path: Path | None = None

    def load(self) -> Waveform:
        if self.waveform is not None:
            return self.waveform
        if self.path is None:
            raise ManifestError(f"utterance {self.uid} has neither audio nor a path")
        try:
            return read_wav(self.path)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"cannot read audio for {self.uid} at {self.path}: {exc}") from exc


@dataclass
class Dataset:
    utterances: list[Utterance]
    languages: list[str]

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.lang for u in self.utterances], dtype=np.int64)

    def features(self, cfg: FeatureConfig = FeatureConfig()) -> list[FeatureSequence]:
        return [logmel(u.load(), cfg) for u in self.utterances]

    def subset(self, idx) -> "Dataset":
        return Dataset([self.utterances[i] for i in idx], list(self.languages))


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path: str | Path) -> Dataset:
    """JSON-lines with exactly the fields ``path`` and ``lang``.

    Language indices follow the sorted language codes.  Relative audio paths
    are resolved against the manifest's directory.  Audio is read lazily.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise ManifestError(f"{path}:{lineno}: expected an object")
        extra = sorted(set(rec) - {"path", "lang"})
        if extra:
            raise ManifestError(f"{path}:{lineno}: unknown field(s) {extra}")
        missing = sorted({"path", "lang"} - set(rec))
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing field(s) {missing}")
        records.append((str(rec["path"]), str(rec["lang"])))
    if not records:
        raise ManifestError(f"manifest is empty: {path}")
    languages = sorted({lang for _, lang in records})
    index = {code: i for i, code in enumerate(languages)}
    seen: set[str] = set()
    utts = []
    for i, (p, lang) in enumerate(records):
        if p in seen:
            log.warning("duplicate audio path in %s: %s", path, p)
        seen.add(p)
        audio = Path(p)
        if not audio.is_absolute():
            audio = path.parent / audio
        utts.append(Utterance(uid=f"{i:06d}:{p}", lang=index[lang], path=audio))
    return Dataset(utts, languages)


def write_manifest(path: str | Path, records: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for audio, lang in records:
            fh.write(json.dumps({"path": audio, "lang": lang}) + "\n")


def write_corpus(ds: Dataset, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
    """Write every utterance as PCM16 WAV plus a manifest with relative paths."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for u in ds.utterances:
        rel = f"audio/{u.uid}.wav"
        write_wav(out_dir / rel, u.load())
        records.append((rel, ds.languages[u.lang]))
    write_manifest(out_dir / manifest_name, records)
    return out_dir / manifest_name


# ---------------------------------------------------------------------------
# synthetic languages


@dataclass(frozen=True)
class Unit:
    f0: float
    formants: tuple[float, float]
    bandwidths: tuple[float, float]
    noise: float


@dataclass
class SyntheticLanguageSpec:
    index: int
    inventory: np.ndarray  # unit ids into the shared pool
    transitions: np.ndarray  # (k, k) row-stochastic, over inventory positions
    initial: np.ndarray  # (k,)
    duration_ms: tuple[float, float]
    tilt: float  # first-order emphasis coefficient

    def __post_init__(self):
        if not np.allclose(self.transitions.sum(axis=1), 1.0):
            raise ValueError("transition rows must sum to 1")


@dataclass
class SyntheticCorpus:
    dataset: Dataset
    specs: list[SyntheticLanguageSpec]
    pool: list[Unit] = field(default_factory=list)


def unit_pool(seed: int, size: int = POOL_SIZE) -> list[Unit]:
    rng = substream(seed, "synth.pool")
    units = []
    for _ in range(size):
        f1 = rng.uniform(250.0, 900.0)
        f2 = rng.uniform(f1 + 400.0, 3200.0)
        units.append(
            Unit(
                f0=float(rng.uniform(90.0, 240.0)),
                formants=(float(f1), float(f2)),
                bandwidths=(float(rng.uniform(60, 140)), float(rng.uniform(80, 200))),
                noise=float(rng.uniform(0.0, 0.3)),
            )
        )
    return units


def language_specs(num_langs: int, seed: int, inventory_size: int = 10) -> list[SyntheticLanguageSpec]:
    specs = []
    for lang in range(num_langs):
        rng = substream(seed, "synth.lang", lang)
        inv = np.sort(rng.choice(POOL_SIZE, size=inventory_size, replace=False))
        trans = rng.dirichlet(np.full(inventory_size, 0.3), size=inventory_size)
        lo = rng.uniform(50.0, 90.0)
        specs.append(
            SyntheticLanguageSpec(
                index=lang,
                inventory=inv,
                transitions=trans,
                initial=rng.dirichlet(np.ones(inventory_size)),
                duration_ms=(float(lo), float(lo + rng.uniform(60.0, 120.0))),
                tilt=float(rng.uniform(-0.3, 0.3)),
            )
        )
    return specs


def render_unit(unit: Unit, n: int, pitch: float, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone shaped by two resonances plus a little noise, with 5 ms ramps."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = unit.f0 * pitch
    harmonics = np.arange(1, int(7800.0 // f0) + 1) * f0
    amp = np.zeros_like(harmonics)
    for fc, bw in zip(unit.formants, unit.bandwidths):
        amp += 1.0 / (1.0 + ((harmonics - fc) / bw) ** 2)
    phase = rng.uniform(0, 2 * np.pi, size=harmonics.size)
    tone = np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phase[:, None]).T @ amp
    tone /= max(np.abs(tone).max(), 1e-9)
    sig = tone + unit.noise * rng.standard_normal(n)
    ramp = min(80, n // 2)
    env = np.ones(n)
    if ramp:
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
    return sig * env


def synthesize_utterance(
    spec: SyntheticLanguageSpec, pool: list[Unit], num_samples: int, rng: np.random.Generator
) -> np.ndarray:
    pitch = rng.uniform(0.85, 1.15)
    out = np.zeros(num_samples)
    pos = 0
    state = rng.choice(spec.inventory.size, p=spec.initial)
    while pos < num_samples:
        dur = int(rng.uniform(*spec.duration_ms) * SAMPLE_RATE / 1000)
        n = min(dur, num_samples - pos)
        out[pos:pos + n] = render_unit(pool[spec.inventory[state]], n, pitch, rng)
        pos += n
        state = rng.choice(spec.inventory.size, p=spec.transitions[state])
    emphasized = out.copy()
    emphasized[1:] -= spec.tilt * out[:-1]
    emphasized += 0.01 * rng.standard_normal(num_samples)
    gain = rng.uniform(0.3, 0.8) / max(np.abs(emphasized).max(), 1e-9)
    return np.clip(emphasized * gain, -1.0, 1.0)


def generate_synthetic(num_langs: int, utts_per_lang: int, duration_s: float, seed: int) -> SyntheticCorpus:
    """Balanced corpus of ``num_langs * utts_per_lang`` fixed-length waveforms."""
    if num_langs < 2:
        raise ValueError("need at least two languages")
    pool = unit_pool(seed)
    specs = language_specs(num_langs, seed)
    n = int(round(duration_s * SAMPLE_RATE))
    codes = [f"syn{i}" for i in range(num_langs)]
    utts = []
    for spec in specs:
        for k in range(utts_per_lang):
            rng = substream(seed, "synth.utt", spec.index, k)
            samples = synthesize_utterance(spec, pool, n, rng).astype(np.float32)
            uid = f"{codes[spec.index]}_{k:04d}"
            utts.append(Utterance(uid, spec.index, Waveform(samples, SAMPLE_RATE, uid)))
    return SyntheticCorpus(Dataset(utts, codes), specs, pool)


# ---------------------------------------------------------------------------
# splitting and ordering


def split(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified, deterministic split; each class keeps round(frac * n_c) items for training."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    labels = ds.labels
    train_idx, eval_idx = [], []
    for c in range(len(ds.languages)):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ValueError(f"language {ds.languages[c]!r} has fewer than 2 utterances")
        perm = substream(seed, "data.split", c).permutation(members)
        k = min(max(int(round(train_frac * members.size)), 1), members.size - 1)
        train_idx.extend(np.sort(perm[:k]).tolist())
        eval_idx.extend(np.sort(perm[k:]).tolist())
    return ds.subset(sorted(train_idx)), ds.subset(sorted(eval_idx))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return substream(seed, "data.order", epoch).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int) -> Callable[[int], np.ndarray]:
    """Map a 1-based step to the item indices of that step's batch.

    Items are consumed from successive per-epoch permutations; a batch may
    straddle two epochs.
    """
    cache: dict[int, np.ndarray] = {}

    def order(epoch):
        if epoch not in cache:
            cache.clear()
            cache[epoch] = epoch_order(n, seed, epoch)
        return cache[epoch]

    def at(step: int) -> np.ndarray:
        start = (step - 1) * batch_size
        out = np.empty(batch_size, dtype=np.int64)
        for j in range(batch_size):
            epoch, pos = divmod(start + j, n)
            out[j] = order(epoch)[pos]
        return out

    return at


def nearest_class_mean_accuracy(
    train: list[FeatureSequence], train_labels, test: list[FeatureSequence], test_labels
) -> float:
    """Accuracy of a nearest-class-mean rule on utterance-mean log-mel vectors."""
    xtr = np.stack([f.frames.mean(axis=0) for f in train]).astype(np.float64)
    xte = np.stack([f.frames.mean(axis=0) for f in test]).astype(np.float64)
    ytr, yte = np.asarray(train_labels), np.asarray(test_labels)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-8
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    classes = np.unique(ytr)
    centers = np.stack([xtr[ytr == c].mean(0) for c in classes])
    d = ((xte[:, None, :] - centers[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(1)] == yte))
