"""Uniform and non-uniform adversarial speaker disentanglement training.

For every parameter the update direction is

    g = dL_MDD/dtheta - lambda_c * dL_SPK/dtheta

with ``lambda_c = lambda1`` for feature-extraction (FE) parameters and
``lambda2`` for feature-processing (FP) parameters. The optimiser descends g,
so the model ascends the speaker loss while descending the condition loss.
``lambda1 == lambda2`` is the uniform (single-weight) case.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .autodiff import backward, bce_with_logit, cross_entropy, no_grad
from .autodiff.tensor import _sigmoid_np
from .data import Corpus, SegmentBatch, balance_subset, crop_and_segment, segment_full
from .errors import ConfigError, DataError, NumericalError
from .models import FE, FP, Model, ModelSpec, build_model
from .seeding import derive_seed, substream

log = logging.getLogger(__name__)

HEAD_MODES = ("paper_literal", "cooperative_head")
SPEAKER_HEAD = "speaker_prediction"


@dataclass(frozen=True)
class AdversarialConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    head_mode: str = "paper_literal"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"adversarial weights must be >= 0, got {self.lambda1}, {self.lambda2}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    @classmethod
    def baseline(cls, head_mode: str = "paper_literal") -> "AdversarialConfig":
        return cls(0.0, 0.0, head_mode)

    @classmethod
    def usd(cls, lam: float, head_mode: str = "paper_literal") -> "AdversarialConfig":
        return cls(lam, lam, head_mode)

    @classmethod
    def from_beta(cls, beta: float, lambda2: float, head_mode: str = "paper_literal") -> "AdversarialConfig":
        return cls(beta * lambda2, lambda2, head_mode)

    def beta(self) -> float:
        if self.lambda2 <= 0:
            raise ConfigError("beta = lambda1 / lambda2 is undefined for lambda2 = 0")
        return self.lambda1 / self.lambda2

    @property
    def is_uniform(self) -> bool:
        return self.lambda1 == self.lambda2

    @property
    def is_baseline(self) -> bool:
        return self.lambda1 == 0 and self.lambda2 == 0

    def weight(self, tag: str) -> float:
        if tag == FE:
            return self.lambda1
        if tag == FP:
            return self.lambda2
        raise ConfigError(f"unknown component tag {tag!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    epochs: int = 50
    batch_size: int = 16
    ensemble_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        for name in ("epochs", "batch_size", "ensemble_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossBundle:
    l_mdd: float
    l_spk: float
    l_total: float


def loss_bundle(l_mdd: float, l_spk: float, cfg: AdversarialConfig, n_fe: int = 1, n_fp: int = 1) -> LossBundle:
    """Logging scalar; exact ``L_MDD - lambda * L_SPK`` only in the uniform case.

    Non-uniform runs report the parameter-count-weighted mean of the two
    weights in place of lambda; updates never use this value.
    """
    lam = cfg.lambda1 if cfg.is_uniform else (n_fe * cfg.lambda1 + n_fp * cfg.lambda2) / (n_fe + n_fp)
    return LossBundle(l_mdd, l_spk, l_mdd - lam * l_spk)


def assemble_update(
    grads_mdd: Mapping[str, np.ndarray],
    grads_spk: Mapping[str, np.ndarray],
    tags: Mapping[str, str],
    cfg: AdversarialConfig,
) -> dict[str, np.ndarray]:
    """Per-parameter update direction for a descent optimiser.

    FE: ``g = dL_MDD - lambda1 * dL_SPK``; FP: ``g = dL_MDD - lambda2 * dL_SPK``.
    With ``head_mode='cooperative_head'`` the speaker head instead gets
    ``+dL_SPK`` (it learns to identify speakers while the trunk is adversarial).
    """
    keys = set(grads_mdd)
    if keys != set(grads_spk) or keys != set(tags):
        raise ConfigError(
            "gradient maps and tag map must share one key set; differing keys: "
            f"{sorted(keys ^ set(grads_spk) | keys ^ set(tags))}"
        )
    out = {}
    for name in grads_mdd:
        if cfg.head_mode == "cooperative_head" and name.split(".", 1)[0] == SPEAKER_HEAD:
            out[name] = np.array(grads_spk[name], copy=True)
            continue
        lam = cfg.weight(tags[name])
        out[name] = grads_mdd[name] - lam * grads_spk[name]
    return out


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Mapping, grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            p.data -= (self.lr * grads[name]).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


# ---------------------------------------------------------------------------
# one step / one epoch


@dataclass
class StepResult:
    l_mdd: float
    l_spk: float
    update: dict[str, np.ndarray]
    grads_mdd: dict[str, np.ndarray]
    grads_spk: dict[str, np.ndarray]


def _first_nonfinite_layer(activations) -> str | None:
    for name, t in activations.items():
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def compute_update(model: Model, batch: SegmentBatch, adv: AdversarialConfig) -> StepResult:
    """Forward + the two backward passes + per-component assembly (no parameter change)."""
    out = model.forward(batch.segments)
    l_mdd = bce_with_logit(out.mdd_logit, batch.condition)
    l_spk = cross_entropy(out.spk_logits, batch.speaker)
    for name, loss in (("L_MDD", l_mdd), ("L_SPK", l_spk)):
        if not np.isfinite(loss.data).all():
            layer = _first_nonfinite_layer(out.activations)
            where = f"first non-finite layer: {layer}" if layer else "all activations finite"
            raise NumericalError(f"{name} is not finite ({where})", layer=layer)
    params = model.params
    model.zero_grad()
    backward(l_mdd)
    grads_mdd = {n: _grad_or_zero(p) for n, p in params.items()}
    model.zero_grad()
    if adv.is_baseline and adv.head_mode == "paper_literal":
        # speaker branch detached: identical to a trainer without the adversary
        grads_spk = {n: np.zeros_like(p.data) for n, p in params.items()}
    else:
        backward(l_spk)
        grads_spk = {n: _grad_or_zero(p) for n, p in params.items()}
        model.zero_grad()
    update = assemble_update(grads_mdd, grads_spk, model.tags, adv)
    return StepResult(float(l_mdd.data), float(l_spk.data), update, grads_mdd, grads_spk)


def _grad_or_zero(p) -> np.ndarray:
    return p.grad if p.grad is not None else np.zeros_like(p.data)


def _group_norm(grads: Mapping[str, np.ndarray], names: Iterable[str], scale: float = 1.0) -> float:
    total = 0.0
    for n in names:
        g = np.asarray(grads[n], dtype=np.float64)
        total += float(np.sum(g * g))
    return abs(scale) * math.sqrt(total)


@dataclass
class EpochStats:
    l_mdd: float
    l_spk: float
    grad_norm_fe: float
    grad_norm_fp: float
    adv_grad_norm_fe: float
    adv_grad_norm_fp: float
    steps: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def iterate_batches(segments: SegmentBatch, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(segments)) if rng is None else rng.permutation(len(segments))
    for start in range(0, len(order), batch_size):
        yield segments.subset(np.sort(order[start : start + batch_size]))


def train_epoch(
    model: Model,
    batches: Iterable[SegmentBatch],
    adv_cfg: AdversarialConfig,
    train_cfg: TrainConfig,
    optimizer=None,
) -> EpochStats:
    """One pass over ``batches``; returns mean losses and mean per-component norms.

    ``grad_norm_*`` are norms of the assembled update; ``adv_grad_norm_*`` are
    norms of the adversarial contribution ``lambda_c * dL_SPK`` per component.
    """
    optimizer = optimizer if optimizer is not None else make_optimizer(train_cfg)
    fe, fp = model.group(FE), model.group(FP)
    sums = np.zeros(6)
    steps = 0
    for batch in batches:
        res = compute_update(model, batch, adv_cfg)
        sums += (
            res.l_mdd,
            res.l_spk,
            _group_norm(res.update, fe),
            _group_norm(res.update, fp),
            _group_norm(res.grads_spk, fe, adv_cfg.lambda1),
            _group_norm(res.grads_spk, fp, adv_cfg.lambda2),
        )
        optimizer.step(model.params, res.update)
        steps += 1
    if steps == 0:
        raise DataError("train_epoch received no batches")
    return EpochStats(*(sums / steps), steps=steps)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleModel:
    members: list[Model]
    member_seeds: list[int]
    subset_indices: list[np.ndarray] = field(default_factory=list)

    @property
    def spec(self) -> ModelSpec:
        return self.members[0].spec

    def __len__(self) -> int:
        return len(self.members)


def training_pool(corpus: Corpus, seed: int, segment_len: int) -> SegmentBatch:
    return SegmentBatch.concat(crop_and_segment(corpus, seed, "train", segment_len), segment_len)


def train_ensemble(
    corpus: Corpus,
    model_spec: ModelSpec,
    adv_cfg: AdversarialConfig,
    train_cfg: TrainConfig,
    log_fn: Callable[[dict], None] | None = None,
    pool: SegmentBatch | None = None,
) -> EnsembleModel:
    """Train ``ensemble_size`` members, each on its own balanced random subset.

    Subset and initialisation seeds depend only on the root seed and member
    index, so runs that differ only in adversarial weights start from the same
    members and see the same data.
    """
    missing = {0, 1} - corpus.conditions_present("train")
    if missing:
        raise DataError(f"training data lacks condition class(es) {sorted(missing)}")
    spec = model_spec.replace(num_speakers=corpus.num_speakers)
    root = train_cfg.seed
    if pool is None:
        pool = training_pool(corpus, derive_seed(root, "data"), spec.segment_len)
    members, seeds, subsets = [], [], []
    for m in range(train_cfg.ensemble_size):
        subset, idx = balance_subset(pool, derive_seed(root, "sampling", m))
        init_seed = derive_seed(root, "init", m)
        model = build_model(spec.replace(seed=init_seed))
        train_member(model, subset, adv_cfg, train_cfg, member=m, log_fn=log_fn)
        members.append(model)
        seeds.append(init_seed)
        subsets.append(idx)
    return EnsembleModel(members, seeds, subsets)


def train_member(
    model: Model,
    segments: SegmentBatch,
    adv_cfg: AdversarialConfig,
    train_cfg: TrainConfig,
    member: int = 0,
    log_fn: Callable[[dict], None] | None = None,
) -> list[EpochStats]:
    optimizer = make_optimizer(train_cfg)
    history = []
    for epoch in range(train_cfg.epochs):
        rng = substream(train_cfg.seed, "shuffle", member, epoch)
        stats = train_epoch(model, iterate_batches(segments, train_cfg.batch_size, rng), adv_cfg, train_cfg, optimizer)
        history.append(stats)
        record = {
            "member": member,
            "epoch": epoch,
            "l_mdd": stats.l_mdd,
            "l_spk": stats.l_spk,
            "grad_norm_fe": stats.grad_norm_fe,
            "grad_norm_fp": stats.grad_norm_fp,
        }
        log.info("member %d epoch %d  L_MDD %.4f  L_SPK %.4f", member, epoch, stats.l_mdd, stats.l_spk)
        if log_fn is not None:
            log_fn(record)
    return history


def jsonl_logger(path) -> Callable[[dict], None]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("")

    def write(record: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=False) + "\n")

    return write


# ---------------------------------------------------------------------------
# inference


def member_probabilities(model: Model, segments: SegmentBatch, batch_size: int = 32) -> np.ndarray:
    probs = []
    with no_grad():
        for start in range(0, len(segments), batch_size):
            out = model.forward(segments.segments[start : start + batch_size])
            z = out.mdd_logit.data.reshape(-1).astype(np.float64)
            probs.append(_sigmoid_np(z))
    return np.concatenate(probs) if probs else np.zeros(0)


def predict_speaker_level(
    ensemble: EnsembleModel, eval_data, speakers: Iterable[str] | None = None, threshold: float = 0.5
) -> dict[str, tuple[float, int]]:
    """Speaker -> (mean probability over members and segments, label ``prob >= threshold``).

    ``eval_data`` is a Corpus (its eval split is fully segmented) or a SegmentBatch.
    """
    if isinstance(eval_data, Corpus):
        if speakers is None:
            speakers = list(dict.fromkeys(eval_data.records[i].speaker_id for i in eval_data.split("eval")))
        eval_data = segment_full(eval_data, "eval", ensemble.spec.segment_len)
    segs: SegmentBatch = eval_data
    probs = np.stack([member_probabilities(m, segs) for m in ensemble.members])
    ids = segs.speaker_ids
    if speakers is None:
        speakers = list(dict.fromkeys(ids.tolist()))
    out = {}
    for spk in speakers:
        mask = ids == spk
        if not mask.any():
            raise DataError(f"speaker {spk} has no evaluation segments")
        p = float(probs[:, mask].mean())
        out[spk] = (p, int(p >= threshold))
    return out
