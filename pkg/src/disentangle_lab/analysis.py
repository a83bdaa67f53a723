"""Identity-leakage probing, layer-wise GDV separability and detection metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .autodiff import no_grad
from .data import SegmentBatch
from .errors import ConfigError, DataError
from .models import Model
from .seeding import substream

log = logging.getLogger(__name__)

MODEL_TAGS = ("baseline", "usd", "nusd")


# ---------------------------------------------------------------------------
# Generalized Discrimination Value


def _fsum_mean(values: np.ndarray) -> float:
    # exactly rounded, so the result does not depend on element order
    return math.fsum(values.tolist()) / len(values)


def gdv(points, labels) -> float:
    """Sign-flipped Generalized Discrimination Value (higher = more separable).

    Each dimension is z-scored and scaled by 0.5; the score is the mean
    intra-class distance minus the mean pairwise inter-class distance, divided
    by sqrt(D), then negated. Zero-variance dimensions are dropped with a
    warning. Sums are exactly rounded so permuting samples or renaming classes
    leaves the value bit-identical.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"points must be an N x D matrix, got shape {x.shape}")
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise ConfigError(f"{x.shape[0]} points but {labels.shape[0]} labels")
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise ConfigError("GDV needs at least two classes")
    if counts.min() < 2:
        raise ConfigError(f"class {classes[np.argmin(counts)]!r} has fewer than two points")
    cols = x.T
    mu = np.array([_fsum_mean(c) for c in cols])
    var = np.array([_fsum_mean((c - m) ** 2) for c, m in zip(cols, mu)])
    keep = var > 0
    if not keep.all():
        log.warning("GDV: dropping %d zero-variance dimension(s)", int((~keep).sum()))
    if not keep.any():
        return 0.0
    z = 0.5 * (x[:, keep] - mu[keep]) / np.sqrt(var[keep])
    d = int(keep.sum())
    groups = [z[inverse == k] for k in range(len(classes))]
    intra = [_fsum_mean(pdist(g)) for g in groups]
    inter = [
        _fsum_mean(cdist(groups[a], groups[b]).ravel())
        for a in range(len(groups))
        for b in range(a + 1, len(groups))
    ]
    raw = (math.fsum(intra) / len(intra) - math.fsum(inter) / len(inter)) / math.sqrt(d)
    return -raw


@dataclass
class GDVEntry:
    layer: str
    speaker_gdv: float
    mdd_gdv: float


@dataclass
class GDVReport:
    entries: list[GDVEntry]
    sign_flipped: bool = True
    model_tag: str = ""

    @property
    def layers(self) -> list[str]:
        return [e.layer for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "sign_flipped": self.sign_flipped,
            "layers": [dataclasses.asdict(e) for e in self.entries],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "speaker_gdv", "mdd_gdv"])
            for e in self.entries:
                w.writerow([e.layer, repr(e.speaker_gdv), repr(e.mdd_gdv)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path, model_tag: str = "") -> "GDVReport":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([GDVEntry(r["layer"], float(r["speaker_gdv"]), float(r["mdd_gdv"])) for r in rows], True, model_tag)


def pooled_activations(model: Model, segments: SegmentBatch, batch_size: int = 32) -> dict[str, np.ndarray]:
    """Per non-prediction layer, one vector per segment (time-mean for sequence layers)."""
    pooled: dict[str, list[np.ndarray]] = {}
    names = None
    with no_grad():
        for start in range(0, len(segments), batch_size):
            out = model.forward(segments.segments[start : start + batch_size])
            names = out.analysis_layers()
            for name in names:
                a = out.activations[name].data
                pooled.setdefault(name, []).append(a.mean(axis=-1) if a.ndim == 3 else a)
    if names is None:
        raise DataError("no segments to analyse")
    return {n: np.concatenate(pooled[n]).astype(np.float64) for n in names}


def layerwise_gdv(model: Model, segments: SegmentBatch, model_tag: str = "", batch_size: int = 32) -> GDVReport:
    """Speaker and condition GDV for every non-prediction layer, in layer order."""
    acts = pooled_activations(model, segments, batch_size)
    entries = [
        GDVEntry(name, gdv(vecs, segments.speaker_ids.astype(str)), gdv(vecs, segments.condition))
        for name, vecs in acts.items()
    ]
    return GDVReport(entries, True, model_tag)


# ---------------------------------------------------------------------------
# speaker-identity probe


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    speakers: np.ndarray
    conditions: np.ndarray
    tag: str = "baseline"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.speakers = np.asarray(self.speakers)
        self.conditions = np.asarray(self.conditions)
        n = self.vectors.shape[0]
        if self.vectors.ndim != 2 or len(self.speakers) != n or len(self.conditions) != n:
            raise ConfigError("embedding rows, speaker ids and condition labels must align")
        if self.tag not in MODEL_TAGS:
            raise ConfigError(f"model tag must be one of {MODEL_TAGS}, got {self.tag!r}")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def embed(model: Model, segments: SegmentBatch, tag: str = "baseline", batch_size: int = 32) -> EmbeddingSet:
    """Embedding-layer (or last recurrent state) vectors; the speaker head is not used."""
    vecs = []
    with no_grad():
        for start in range(0, len(segments), batch_size):
            vecs.append(model.forward(segments.segments[start : start + batch_size]).embedding.data)
    vectors = np.concatenate(vecs) if vecs else np.zeros((0, model.spec.embedding_dim))
    return EmbeddingSet(vectors, segments.speaker_ids.astype(str), segments.condition, tag)


@dataclass
class ProbeModel:
    """One-vs-rest linear max-margin classifiers over standardised embeddings."""

    classes: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    trained_on: str

    def decision(self, vectors: np.ndarray) -> np.ndarray:
        z = (np.asarray(vectors, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weights.T + self.bias

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision(vectors), axis=1)]


def train_probe(
    train: EmbeddingSet,
    reg: float = 1e-3,
    epochs: int = 200,
    seed: int = 0,
    batch_size: int = 32,
    lr0: float = 0.1,
) -> ProbeModel:
    """L2-regularised hinge loss per class, minibatch subgradient descent.

    Step size ``lr0 / (1 + lr0 * reg * t)``; the bias is not regularised.
    """
    if train.tag != "baseline":
        raise ConfigError(f"probe must be trained on baseline embeddings, got tag {train.tag!r}")
    classes, y_idx = np.unique(train.speakers, return_inverse=True)
    if len(classes) < 2:
        raise ConfigError("probe needs at least two speakers")
    x = train.vectors
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    n, d = z.shape
    s = len(classes)
    targets = -np.ones((n, s))
    targets[np.arange(n), y_idx] = 1.0
    w = np.zeros((s, d))
    b = np.zeros(s)
    rng = substream(seed, "probe")
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = z[idx], targets[idx]
            margin = yb * (xb @ w.T + b)
            coef = np.where(margin < 1.0, yb, 0.0) / len(idx)
            lr = lr0 / (1.0 + lr0 * reg * t)
            w -= lr * (reg * w - coef.T @ xb)
            b += lr * coef.sum(axis=0)
            t += 1
    return ProbeModel(classes, w, b, mean, scale, train.tag)


def eval_probe(probe: ProbeModel, evaluation: EmbeddingSet) -> float:
    """Fraction of evaluation rows whose speaker is predicted correctly."""
    eval_speakers = set(np.unique(evaluation.speakers).tolist())
    probe_speakers = set(probe.classes.tolist())
    if eval_speakers != probe_speakers:
        raise DataError(
            "probe and evaluation speaker sets differ: "
            f"only in probe {sorted(probe_speakers - eval_speakers)}, only in eval {sorted(eval_speakers - probe_speakers)}"
        )
    if evaluation.dim != probe.weights.shape[1]:
        raise ConfigError(f"embedding dim {evaluation.dim} does not match probe dim {probe.weights.shape[1]}")
    return float(np.mean(probe.predict(evaluation.vectors) == evaluation.speakers))


@dataclass
class ProbeResult:
    train_tag: str
    eval_tag: str
    accuracy: float
    chance: float
    num_speakers: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# detection metrics


@dataclass
class F1Report:
    f1_d: float
    f1_nd: float
    f1_avg: float
    sid_accuracy: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def rounded(self, digits: int = 4) -> dict:
        return {k: (None if v is None else round(v, digits)) for k, v in self.to_dict().items()}

    def write_csv(self, path, run: str = "") -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "f1_avg", "f1_nd", "f1_d", "sid_accuracy"])
            w.writerow([run, repr(self.f1_avg), repr(self.f1_nd), repr(self.f1_d), "" if self.sid_accuracy is None else repr(self.sid_accuracy)])


def _f1(pred: np.ndarray, true: np.ndarray, cls: int) -> float:
    tp = int(np.sum((pred == cls) & (true == cls)))
    fp = int(np.sum((pred == cls) & (true != cls)))
    fn = int(np.sum((pred != cls) & (true == cls)))
    denom = 2 * tp + fp + fn
    return 0.0 if tp == 0 or denom == 0 else 2 * tp / denom


def f1_report(pred: Sequence[int], true: Sequence[int], positive: int = 1, sid_accuracy: float | None = None) -> F1Report:
    """Per-class F1 for depressed (``positive``) and non-depressed, plus their unweighted mean."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ConfigError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ConfigError("f1_report needs at least one label")
    negative = 1 - positive
    f1_d = _f1(pred, true, positive)
    f1_nd = _f1(pred, true, negative)
    return F1Report(f1_d, f1_nd, (f1_d + f1_nd) / 2, sid_accuracy)
