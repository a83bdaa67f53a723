"""Corpus ingestion, preprocessing and the synthetic entangled corpus.

Audio is mono 16 kHz; a 3.84 s segment is 61440 samples. Training utterances
are randomly cropped to the shortest training utterance and cut into
consecutive non-overlapping segments; evaluation utterances are segmented in
full. Every segment is mean-variance normalised.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError
from .seeding import substream

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SEGMENT_LEN = 61440
NORM_EPS = 1e-8
MANIFEST_HEADER = ("speaker_id", "condition", "split", "path")
SPLITS = ("train", "eval")


# ---------------------------------------------------------------------------
# WAV I/O


def write_wav(path, audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float audio in [-1, 1] as 16-bit mono PCM."""
    pcm = np.round(np.clip(audio, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def wav_info(path) -> tuple[int, int, int, int]:
    """(sample_rate, channels, sample_width_bytes, num_frames)."""
    with wave.open(str(path), "rb") as fh:
        return fh.getframerate(), fh.getnchannels(), fh.getsampwidth(), fh.getnframes()


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getnchannels() != 1:
            raise DataError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0, rate


# ---------------------------------------------------------------------------
# records and corpus


@dataclass
class UtteranceRecord:
    speaker_id: str
    condition: int
    split: str
    num_samples: int
    path: Path | None = None
    audio: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.condition not in (0, 1):
            raise DataError(f"condition must be 0 or 1, got {self.condition!r} for {self.speaker_id}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r} for {self.speaker_id}")
        if self.num_samples <= 0:
            raise DataError(f"utterance of {self.speaker_id} has no samples")

    def load(self) -> np.ndarray:
        if self.audio is not None:
            return self.audio
        if self.path is None:
            raise DataError(f"record for {self.speaker_id} has neither audio nor path")
        audio, rate = read_wav(self.path)
        if rate != SAMPLE_RATE:
            raise DataError(f"{self.path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
        return audio


@dataclass
class Corpus:
    records: list[UtteranceRecord]
    speakers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.speakers:
            seen: dict[str, None] = {}
            for r in self.records:
                if r.split == "train":
                    seen.setdefault(r.speaker_id, None)
            self.speakers = list(seen)
        self._index = {s: i for i, s in enumerate(self.speakers)}
        labels: dict[str, int] = {}
        for r in self.records:
            if labels.setdefault(r.speaker_id, r.condition) != r.condition:
                raise DataError(f"speaker {r.speaker_id} carries conflicting condition labels")
        self.speaker_conditions = labels

    @property
    def num_speakers(self) -> int:
        return len(self.speakers)

    def speaker_index(self, speaker_id: str) -> int:
        """Contiguous training id, or -1 for a speaker seen only in evaluation."""
        return self._index.get(speaker_id, -1)

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def conditions_present(self, split: str = "train") -> set[int]:
        return {self.records[i].condition for i in self.split(split)}


@dataclass
class SegmentBatch:
    """Fixed-length segments with index-aligned labels and provenance."""

    segments: np.ndarray
    condition: np.ndarray
    speaker: np.ndarray
    utterance: np.ndarray
    offset: np.ndarray
    speaker_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.segments.shape[0])

    def subset(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentBatch(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))

    @staticmethod
    def concat(batches: Sequence["SegmentBatch"], segment_len: int = SEGMENT_LEN) -> "SegmentBatch":
        if not batches:
            return SegmentBatch.empty(segment_len)
        return SegmentBatch(
            *(np.concatenate([getattr(b, f.name) for b in batches]) for f in dataclasses.fields(SegmentBatch))
        )

    @staticmethod
    def empty(segment_len: int = SEGMENT_LEN) -> "SegmentBatch":
        z = np.zeros(0, dtype=np.int64)
        return SegmentBatch(
            np.zeros((0, segment_len), np.float32), z, z.copy(), z.copy(), z.copy(), np.zeros(0, dtype=object)
        )


# ---------------------------------------------------------------------------
# preprocessing


def normalize(segment: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Zero mean, unit variance along the last axis; constant input maps to zeros."""
    x = np.asarray(segment, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(np.maximum(var, eps))).astype(np.float32)


def _segment_record(
    corpus: Corpus, idx: int, audio: np.ndarray, start: int, length: int, segment_len: int, norm: bool
) -> SegmentBatch:
    rec = corpus.records[idx]
    n = length // segment_len
    offsets = start + segment_len * np.arange(n, dtype=np.int64)
    segs = np.stack([audio[o : o + segment_len] for o in offsets]) if n else np.zeros((0, segment_len), np.float32)
    if norm and n:
        segs = normalize(segs)
    return SegmentBatch(
        segments=segs.astype(np.float32, copy=False),
        condition=np.full(n, rec.condition, dtype=np.int64),
        speaker=np.full(n, corpus.speaker_index(rec.speaker_id), dtype=np.int64),
        utterance=np.full(n, idx, dtype=np.int64),
        offset=offsets,
        speaker_ids=np.array([rec.speaker_id] * n, dtype=object),
    )


def crop_and_segment(
    corpus: Corpus, seed: int, split: str = "train", segment_len: int = SEGMENT_LEN, norm: bool = True
) -> list[SegmentBatch]:
    """Random-crop every ``split`` utterance to the shortest one, then segment.

    Returns one batch per utterance in record order; each holds
    ``floor(L_min / segment_len)`` consecutive segments, the remainder of the
    crop is discarded.
    """
    indices = corpus.split(split)
    if not indices:
        raise DataError(f"corpus has no {split!r} utterances")
    short = [
        f"{corpus.records[i].speaker_id}:{corpus.records[i].path or i} ({corpus.records[i].num_samples})"
        for i in indices
        if corpus.records[i].num_samples < segment_len
    ]
    if short:
        raise DataError(f"utterances shorter than {segment_len} samples: " + ", ".join(short))
    l_min = min(corpus.records[i].num_samples for i in indices)
    rng = substream(seed, "crop")
    out = []
    for i in indices:
        audio = corpus.records[i].load()
        start = int(rng.integers(0, len(audio) - l_min + 1))
        out.append(_segment_record(corpus, i, audio, start, l_min, segment_len, norm))
    return out


def segment_full(corpus: Corpus, split: str = "eval", segment_len: int = SEGMENT_LEN, norm: bool = True) -> SegmentBatch:
    """Segment every ``split`` utterance from offset 0 without cropping or balancing."""
    batches = []
    for i in corpus.split(split):
        audio = corpus.records[i].load()
        batches.append(_segment_record(corpus, i, audio, 0, len(audio), segment_len, norm))
    return SegmentBatch.concat(batches, segment_len)


def balance_subset(segments: SegmentBatch, seed: int) -> tuple[SegmentBatch, np.ndarray]:
    """Sample ``min(n_pos, n_neg)`` segments per class without replacement.

    Returns the subset and its indices into ``segments`` (sorted).
    """
    pos = np.flatnonzero(segments.condition == 1)
    neg = np.flatnonzero(segments.condition == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError(f"both classes required, got {len(pos)} positive / {len(neg)} negative segments")
    n = min(len(pos), len(neg))
    rng = substream(seed, "sampling")
    chosen = np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)])
    chosen.sort()
    return segments.subset(chosen), chosen


# ---------------------------------------------------------------------------
# manifest ingestion


def write_manifest(path, rows: Sequence[tuple[str, int, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def ingest_corpus(manifest_path, load_audio: bool = False) -> Corpus:
    """Read a ``speaker_id,condition,split,path`` CSV; paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    with open(manifest_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{manifest_path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = [r for r in reader if r]
    records = []
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise DataError(f"{manifest_path}:{lineno}: expected 4 fields, got {len(row)}")
        speaker, cond, split, rel = (v.strip() for v in row)
        key = (speaker, rel)
        if key in seen:
            raise DataError(f"{manifest_path}:{lineno}: duplicate row for speaker {speaker} path {rel}")
        seen.add(key)
        if split not in SPLITS:
            raise DataError(f"{manifest_path}:{lineno}: unknown split {split!r}")
        if cond not in ("0", "1"):
            raise DataError(f"{manifest_path}:{lineno}: condition must be 0 or 1, got {cond!r}")
        path = (base / rel).resolve()
        if not path.is_file():
            raise DataError(f"{manifest_path}:{lineno}: missing audio file {path}")
        rate, channels, width, frames = wav_info(path)
        if rate != SAMPLE_RATE:
            raise DataError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
        if channels != 1 or width != 2:
            raise DataError(f"{path}: expected mono 16-bit PCM")
        audio = read_wav(path)[0] if load_audio else None
        records.append(UtteranceRecord(speaker, int(cond), split, frames, path=path, audio=audio))
    if not records:
        raise DataError(f"{manifest_path}: no rows")
    return Corpus(records)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    """Speaker- and condition-entangled voiced audio.

    Each speaker has a fixed pitch and vocal-tract resonances (identity cue,
    scaled by ``speaker_effect``) and one condition label. The condition slows
    the syllable-rate amplitude modulation, flattens pitch movement and adds
    pauses (scaled by ``condition_effect``).
    """

    num_speakers: int = 20
    utterances_per_speaker: int = 40
    f0_range: tuple[float, float] = (90.0, 250.0)
    condition_effect: float = 0.8
    speaker_effect: float = 1.0
    noise_level: float = 0.05
    utterance_len_range: tuple[int, int] = (61440, 81920)
    eval_fraction: float = 0.25
    seed: int = 7

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        lo, hi = self.f0_range
        if not (0 < lo <= hi < SAMPLE_RATE / 2):
            raise ConfigError(f"f0_range must satisfy 0 < low <= high < {SAMPLE_RATE // 2}, got {self.f0_range}")
        if self.num_speakers < 2:
            raise ConfigError(f"num_speakers must be >= 2, got {self.num_speakers}")
        if self.utterances_per_speaker < 1:
            raise ConfigError("utterances_per_speaker must be >= 1")
        for name in ("condition_effect", "speaker_effect"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        a, b = self.utterance_len_range
        if not (0 < a <= b):
            raise ConfigError(f"utterance_len_range must satisfy 0 < low <= high, got {self.utterance_len_range}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must lie in [0, 1), got {self.eval_fraction}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config fields: {sorted(unknown)}")
        for key in ("f0_range", "utterance_len_range"):
            if key in d:
                if len(d[key]) != 2:
                    raise ConfigError(f"{key} must be a pair")
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["f0_range"] = list(self.f0_range)
        d["utterance_len_range"] = list(self.utterance_len_range)
        return d


# shared voice the speaker_effect interpolates away from
_COMMON_FORMANTS = np.array([600.0, 1500.0, 2500.0])
_FORMANT_SPREAD = np.array([200.0, 400.0, 500.0])
_FORMANT_BANDWIDTH = np.array([90.0, 120.0, 160.0])
_BASE_SYLLABLE_RATE = 5.0


def _speaker_voice(cfg: SynthConfig, s: int) -> tuple[float, np.ndarray, float]:
    rng = substream(cfg.seed, "speaker", s)
    lo, hi = cfg.f0_range
    f0_common = 0.5 * (lo + hi)
    f0 = f0_common + cfg.speaker_effect * (rng.uniform(lo, hi) - f0_common)
    formants = _COMMON_FORMANTS + cfg.speaker_effect * rng.uniform(-1, 1, 3) * _FORMANT_SPREAD
    tilt = 0.9 + cfg.speaker_effect * rng.uniform(-0.08, 0.08)
    return f0, formants, tilt


def _condition_labels(cfg: SynthConfig) -> np.ndarray:
    rng = substream(cfg.seed, "labels")
    labels = np.zeros(cfg.num_speakers, dtype=np.int64)
    labels[rng.permutation(cfg.num_speakers)[: cfg.num_speakers // 2]] = 1
    return labels


def _resonator(freq: float, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a


def _synth_utterance(cfg: SynthConfig, s: int, u: int, condition: int) -> np.ndarray:
    f0, formants, tilt = _speaker_voice(cfg, s)
    rng = substream(cfg.seed, "utterance", s, u)
    lo, hi = cfg.utterance_len_range
    n = int(rng.integers(lo, hi + 1))
    t = np.arange(n) / SAMPLE_RATE
    ce = cfg.condition_effect * condition

    # pitch contour: slow intonation whose depth shrinks with the condition
    depth = 0.12 * (1.0 - 0.8 * ce)
    contour = depth * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    f0_t = f0 * (1.0 + rng.normal(0, 0.01)) * (1.0 + contour)
    phase = np.cumsum(f0_t) / SAMPLE_RATE
    source = np.diff(np.floor(phase), prepend=0.0)
    source = signal.lfilter([1.0], [1.0, -tilt], source)
    voiced = source
    for freq, bw in zip(formants, _FORMANT_BANDWIDTH):
        b, a = _resonator(freq, bw)
        voiced = voiced + 0.5 * signal.lfilter(b, a, source)

    # syllabic amplitude modulation, slower with the condition
    rate = _BASE_SYLLABLE_RATE * (1.0 - 0.5 * ce) * rng.uniform(0.9, 1.1)
    env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) ** 2
    # pauses: Poisson-placed silent stretches, longer and more frequent with the condition
    pause_rate = 0.3 + 1.2 * ce
    mean_pause = 0.15 + 0.35 * ce
    gate = np.ones(n)
    k = rng.poisson(pause_rate * n / SAMPLE_RATE)
    for start, dur in zip(rng.uniform(0, n, k), rng.exponential(mean_pause, k)):
        a0 = int(start)
        gate[a0 : a0 + int(dur * SAMPLE_RATE)] = 0.0
    gate = signal.lfilter([0.02], [1.0, -0.98], gate)
    voiced = voiced * env * gate
    rms = np.sqrt(np.mean(voiced**2))
    if rms > 0:
        voiced = voiced * (0.1 / rms)
    audio = voiced + cfg.noise_level * 0.1 * rng.standard_normal(n)
    return np.clip(audio, -1.0, 1.0).astype(np.float32)


def synth_generate(cfg: SynthConfig, out_dir=None) -> Corpus:
    """Generate the corpus; with ``out_dir`` also write WAVs and ``manifest.csv``.

    Audio in the returned records is the 16-bit-quantised signal, so an
    in-memory corpus and one re-ingested from disk are identical.
    """
    cfg.validate()
    labels = _condition_labels(cfg)
    n_eval = int(round(cfg.utterances_per_speaker * cfg.eval_fraction))
    n_train = cfg.utterances_per_speaker - n_eval
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    records, rows = [], []
    for s in range(cfg.num_speakers):
        speaker = f"spk{s:03d}"
        for u in range(cfg.utterances_per_speaker):
            audio = _synth_utterance(cfg, s, u, int(labels[s]))
            audio = np.round(audio * 32767.0).astype(np.float32) / 32767.0
            split = "train" if u < n_train else "eval"
            path = None
            if out is not None:
                rel = f"wav/{speaker}_utt{u:03d}.wav"
                path = out / rel
                write_wav(path, audio)
                rows.append((speaker, int(labels[s]), split, rel))
            records.append(UtteranceRecord(speaker, int(labels[s]), split, len(audio), path=path, audio=audio))
    if out is not None:
        write_manifest(out / "manifest.csv", rows)
    return Corpus(records)


def band_energies(audio: np.ndarray, bands: int = 32) -> np.ndarray:
    """Log energy in ``bands`` equal-width frequency bands (raw spectral statistics)."""
    spec = np.abs(np.fft.rfft(np.asarray(audio, dtype=np.float64))) ** 2
    edges = np.linspace(0, len(spec), bands + 1).astype(int)
    return np.log(np.array([spec[a:b].sum() for a, b in zip(edges[:-1], edges[1:])]) + 1e-12)
