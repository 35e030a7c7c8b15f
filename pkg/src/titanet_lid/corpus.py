"""Manifests, dataset algebra and the synthetic toy-language corpus."""
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from titanet_lid.audio import AudioSegment, FeatureConfig, log_mel, read_wav, write_wav
from titanet_lid.errors import ManifestError

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("audio_filepath", "duration", "label")


@dataclass(frozen=True)
class ManifestEntry:
    audio_filepath: str
    duration: float
    label: str

    def __post_init__(self):
        if not isinstance(self.label, str) or not self.label:
            raise ValueError("label must be a non-empty string")
        if not isinstance(self.duration, (int, float)) or not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration!r}")
        if not self.audio_filepath:
            raise ValueError("audio_filepath is empty")

    def load(self):
        return read_wav(self.audio_filepath, label=self.label)


@dataclass
class Dataset:
    entries: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def label_set(self):
        return sorted({e.label for e in self.entries})

    @property
    def counts(self):
        c = Counter(e.label for e in self.entries)
        return {label: c[label] for label in self.label_set}

    def count_vector(self, labels):
        c = Counter(e.label for e in self.entries)
        return [c[label] for label in labels]


def load_manifest(path, lazy=False):
    """Parse a newline-delimited JSON manifest.

    Relative audio paths resolve against the manifest's directory. Missing
    audio files raise unless ``lazy`` is set, in which case they are listed in
    ``Dataset.missing``.
    """
    path = Path(path)
    base = path.parent
    entries, missing = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ManifestError("record is not an object", lineno)
            absent = [k for k in MANIFEST_FIELDS if k not in rec]
            if absent:
                raise ManifestError(f"missing field(s) {absent}", lineno)
            extra = sorted(set(rec) - set(MANIFEST_FIELDS))
            if extra:
                log.warning("%s:%d: ignoring unknown field(s) %s", path, lineno, extra)
            audio = str(rec["audio_filepath"])
            if audio and not os.path.isabs(audio):
                audio = str(base / audio)
            try:
                entry = ManifestEntry(audio, rec["duration"], rec["label"])
            except ValueError as exc:
                raise ManifestError(str(exc), lineno) from None
            if not os.path.exists(entry.audio_filepath):
                if not lazy:
                    raise ManifestError(f"audio file not found: {entry.audio_filepath}", lineno)
                missing.append((lineno, entry.audio_filepath))
            entries.append(entry)
    return Dataset(entries, missing)


def save_manifest(dataset, path):
    """Write one JSON record per entry; paths under the manifest's directory are stored relative."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for e in dataset.entries:
            p = Path(e.audio_filepath)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            fh.write(json.dumps({"audio_filepath": str(p), "duration": e.duration, "label": e.label}) + "\n")


def union(a, b):
    """Concatenate two datasets; labels merge and shared-label counts add."""
    return Dataset(list(a.entries) + list(b.entries), list(a.missing) + list(b.missing))


def split_train_val(ds, val_fraction=0.10, seed=0):
    """Stratified per-class split; each class gives ``round_half_up(f * c)`` items (at least 1 if c >= 2)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    by_label = {}
    for i, e in enumerate(ds.entries):
        by_label.setdefault(e.label, []).append(i)
    val_idx = set()
    for ci, label in enumerate(sorted(by_label)):
        idx = by_label[label]
        c = len(idx)
        if c < 2:
            log.warning("class %r has %d item(s); kept entirely in train", label, c)
            continue
        n_val = min(max(1, math.floor(val_fraction * c + 0.5)), c - 1)
        rng = np.random.default_rng([seed, ci])
        val_idx.update(idx[j] for j in rng.permutation(c)[:n_val])
    train = [e for i, e in enumerate(ds.entries) if i not in val_idx]
    val = [e for i, e in enumerate(ds.entries) if i in val_idx]
    return Dataset(train), Dataset(val)


# --------------------------------------------------------------------------- synthetic corpus

LANG_SEED = 2023
_GRID = 150.0 * 1.12 ** np.arange(24)  # fundamental candidates, 150 Hz .. ~2.03 kHz


def language_name(index):
    return f"lang{index:02d}"


@dataclass(frozen=True)
class LanguageProfile:
    """Three harmonic carrier bands, each amplitude-modulated at its own rate."""

    fundamentals: tuple
    am_rates: tuple
    am_depths: tuple


def language_profile(index, lang_seed=LANG_SEED):
    rng = np.random.default_rng([lang_seed, index])
    f0 = tuple(float(f) for f in np.sort(rng.choice(_GRID, size=3, replace=False)))
    rates = tuple(float(r) for r in rng.uniform(2.0, 10.0, size=3))
    depths = tuple(float(d) for d in rng.uniform(0.6, 0.95, size=3))
    return LanguageProfile(f0, rates, depths)


def synth_utterance(profile, duration_s, sample_rate, rng):
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    signal = np.zeros(n)
    for f0, rate, depth in zip(profile.fundamentals, profile.am_rates, profile.am_depths):
        f = f0 * (1.0 + rng.uniform(-0.03, 0.03))
        envelope = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        gain = rng.uniform(0.5, 1.0)
        for h, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
            if h * f < sample_rate / 2:
                signal += gain * amp * envelope * np.sin(2 * np.pi * h * f * t + rng.uniform(0, 2 * np.pi))
    snr_db = rng.uniform(5.0, 20.0)
    noise_power = np.mean(signal ** 2) / 10 ** (snr_db / 10)
    signal = signal + rng.normal(0.0, np.sqrt(noise_power), size=n)
    return signal * (rng.uniform(0.3, 0.8) / np.max(np.abs(signal)))


def synth_corpus(out_dir, num_langs, items_per_lang, duration_s=4.0, sample_rate=16000, seed=0,
                 first_lang=0, lang_seed=LANG_SEED, manifest_name="all.manifest"):
    """Generate PCM16 WAVs for ``num_langs`` toy languages plus a manifest; returns the Dataset.

    Language ``i`` is the same spectral process in every corpus built with the
    same ``lang_seed``; ``first_lang`` offsets the indices so corpora can be
    made disjoint. Each item uses its own derived seed ``(seed, lang, item)``.
    """
    if num_langs < 2:
        raise ValueError("synth_corpus needs at least 2 languages")
    if items_per_lang < 1:
        raise ValueError("items_per_lang must be >= 1")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for li in range(first_lang, first_lang + num_langs):
        profile = language_profile(li, lang_seed)
        label = language_name(li)
        for item in range(items_per_lang):
            rng = np.random.default_rng([seed, li, item])
            samples = synth_utterance(profile, duration_s, sample_rate, rng)
            path = wav_dir / f"{label}_{item:05d}.wav"
            write_wav(path, AudioSegment(samples, sample_rate, label))
            entries.append(ManifestEntry(str(path), len(samples) / sample_rate, label))
    ds = Dataset(entries)
    save_manifest(ds, out_dir / manifest_name)
    return ds


def energy_signature(audio, cfg=FeatureConfig(normalize="none")):
    """Time-averaged log-mel band energies with the overall level removed."""
    sig = log_mel(audio, cfg).mels.mean(axis=1)
    return sig - sig.mean()


def energy_oracle_accuracy(train, test):
    """Held-out accuracy of nearest-centroid classification on energy signatures."""
    labels = train.label_set
    sigs = {label: [] for label in labels}
    for e in train:
        sigs[e.label].append(energy_signature(e.load()))
    centroids = np.stack([np.mean(sigs[label], axis=0) for label in labels])
    correct = 0
    for e in test:
        s = energy_signature(e.load())
        pred = labels[int(np.argmin(((centroids - s) ** 2).sum(axis=1)))]
        correct += pred == e.label
    return correct / max(1, len(test))
