"""Experiment drivers behind the CLI: train, probe, layer-wise GDV, beta sweep."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import (
    F1Report,
    GDVReport,
    ProbeResult,
    embed,
    eval_probe,
    f1_report,
    layerwise_gdv,
    train_probe,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ensure_writable
from .data import Corpus, SegmentBatch, ingest_corpus, segment_full, synth_generate
from .errors import ConfigError, DataError
from .plotting import plot_beta_sweep, plot_gdv, plot_training_log
from .seeding import derive_seed
from .training import (
    AdversarialConfig,
    EnsembleModel,
    jsonl_logger,
    predict_speaker_level,
    train_ensemble,
    training_pool,
)

log = logging.getLogger(__name__)

DEFAULT_BETAS = (10.0, 5.0, 2.0, 1.0, 0.5, 0.2, 0.1)


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.manifest is not None:
        return ingest_corpus(cfg.manifest)
    return synth_generate(cfg.synthetic)


@dataclass
class PreparedData:
    corpus: Corpus
    pool: SegmentBatch
    eval_segments: SegmentBatch
    probe_train: SegmentBatch
    probe_eval: SegmentBatch


def prepare_data(corpus: Corpus, seed: int, segment_len: int) -> PreparedData:
    """Training pool, evaluation segments and the probe's train/eval segment split.

    The probe needs one speaker set on both sides: it trains on the training
    pool and evaluates on evaluation segments of the training speakers. When
    the evaluation split has no such coverage, training utterances are split
    alternately per speaker instead.
    """
    pool = training_pool(corpus, derive_seed(seed, "data"), segment_len)
    eval_segments = segment_full(corpus, "eval", segment_len)
    train_speakers = set(corpus.speakers)
    known = np.isin(eval_segments.speaker_ids.astype(str), list(train_speakers))
    if set(eval_segments.speaker_ids[known].tolist()) == train_speakers:
        probe_train, probe_eval = pool, eval_segments.subset(np.flatnonzero(known))
    else:
        rank = {}
        parity = np.zeros(len(pool), dtype=bool)
        for i, (spk, utt) in enumerate(zip(pool.speaker_ids, pool.utterance)):
            seen = rank.setdefault(spk, {})
            parity[i] = seen.setdefault(int(utt), len(seen)) % 2 == 1
        probe_train, probe_eval = pool.subset(np.flatnonzero(~parity)), pool.subset(np.flatnonzero(parity))
        if set(probe_eval.speaker_ids.tolist()) != set(probe_train.speaker_ids.tolist()):
            raise DataError("probe needs at least two training utterances per speaker")
    return PreparedData(corpus, pool, eval_segments, probe_train, probe_eval)


def speaker_f1(ensemble: EnsembleModel, data: PreparedData) -> tuple[F1Report, dict]:
    preds = predict_speaker_level(ensemble, data.eval_segments)
    speakers = sorted(preds)
    truth = [data.corpus.speaker_conditions[s] for s in speakers]
    report = f1_report([preds[s][1] for s in speakers], truth)
    return report, {s: {"probability": preds[s][0], "label": preds[s][1]} for s in speakers}


def probe_accuracy(
    baseline: EnsembleModel, target: EnsembleModel, data: PreparedData, cfg: ExperimentConfig, target_tag: str
) -> tuple[ProbeResult, list[float]]:
    """Train on baseline embeddings of ``probe_train``; evaluate target embeddings of ``probe_eval``.

    Members are paired by index and the accuracy averaged over pairs.
    """
    if baseline.spec.embedding_dim != target.spec.embedding_dim:
        raise ConfigError(
            f"embedding dims differ: baseline {baseline.spec.embedding_dim} vs target {target.spec.embedding_dim}"
        )
    accs = []
    for m, (base_model, tgt_model) in enumerate(zip(baseline.members, target.members)):
        probe = train_probe(
            embed(base_model, data.probe_train, "baseline"),
            reg=cfg.probe.reg,
            epochs=cfg.probe.epochs,
            seed=derive_seed(cfg.seed, "probe", m),
            batch_size=cfg.probe.batch_size,
        )
        accs.append(eval_probe(probe, embed(tgt_model, data.probe_eval, target_tag)))
    n_spk = len(set(data.probe_train.speaker_ids.tolist()))
    return ProbeResult("baseline", target_tag, float(np.mean(accs)), 1.0 / n_spk, n_spk), accs


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def run_train(
    cfg: ExperimentConfig,
    mode: str,
    baseline_ckpt: Path | None = None,
    out_dir: Path | None = None,
    data: PreparedData | None = None,
    adv: AdversarialConfig | None = None,
    tag: str | None = None,
) -> dict:
    """Train an ensemble, evaluate it and write checkpoint, log, GDV and report.

    The probe accuracy is computed against ``baseline_ckpt`` when given (or
    against this run itself in baseline mode); otherwise it is ``None``.
    """
    t0 = time.perf_counter()
    out = ensure_writable(out_dir or cfg.output_dir)
    adv = adv or cfg.adversarial(mode)
    tag = tag or mode
    if data is None:
        data = prepare_data(load_corpus(cfg), cfg.seed, cfg.model.segment_len)
    log_path = out / f"train_{tag}.jsonl"
    ensemble = train_ensemble(data.corpus, cfg.model, adv, cfg.train, jsonl_logger(log_path), pool=data.pool)
    extra = {"tag": mode, "adversarial": adv.to_dict(), "train": cfg.train.to_dict()}
    ckpt = save_checkpoint(out / f"checkpoint_{tag}.npz", ensemble, data.corpus.speakers, extra)

    f1, speaker_preds = speaker_f1(ensemble, data)
    probe = None
    per_member = None
    if mode == "baseline":
        probe, per_member = probe_accuracy(ensemble, ensemble, data, cfg, "baseline")
    elif baseline_ckpt is not None:
        base, meta = load_checkpoint(baseline_ckpt)
        if meta["extra"].get("tag") != "baseline":
            raise ConfigError(f"{baseline_ckpt} is not a baseline checkpoint")
        probe, per_member = probe_accuracy(base, ensemble, data, cfg, mode)
    if probe is not None:
        f1.sid_accuracy = probe.accuracy

    f1.write_csv(out / f"f1_{tag}.csv", run=tag)

    gdv_report = layerwise_gdv(ensemble.members[0], data.eval_segments, model_tag=mode)
    gdv_csv = out / f"gdv_{tag}.csv"
    gdv_report.write_csv(gdv_csv)
    plot_gdv([gdv_report], out / f"gdv_{tag}.png")
    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    plot_training_log(records, out / f"train_{tag}.png")

    report = {
        "mode": mode,
        "config": cfg.to_dict(),
        "adversarial": adv.to_dict(),
        "f1": f1.to_dict(),
        "probe_accuracy": None if probe is None else probe.accuracy,
        "probe_per_member": per_member,
        "probe_chance": None if probe is None else probe.chance,
        "speakers": speaker_preds,
        "checkpoint": str(ckpt),
        "gdv_report": str(gdv_csv),
        "seed": cfg.seed,
        "wall_clock_s": time.perf_counter() - t0,
    }
    _write_json(out / f"report_{tag}.json", report)
    return report


def run_probe(cfg: ExperimentConfig, baseline_ckpt: Path, target_ckpt: Path, data: PreparedData | None = None) -> dict:
    base, base_meta = load_checkpoint(baseline_ckpt)
    target, target_meta = load_checkpoint(target_ckpt)
    if base_meta["extra"].get("tag", "baseline") != "baseline":
        raise ConfigError(f"{baseline_ckpt} is not a baseline checkpoint")
    if base.spec.embedding_dim != target.spec.embedding_dim:
        raise ConfigError(
            f"embedding dims differ: baseline {base.spec.embedding_dim} vs target {target.spec.embedding_dim}"
        )
    if base_meta["speakers"] != target_meta["speakers"]:
        raise DataError("baseline and target checkpoints were trained on different speaker sets")
    if data is None:
        data = prepare_data(load_corpus(cfg), cfg.seed, base.spec.segment_len)
    target_tag = target_meta["extra"].get("tag", "nusd")
    result, per_member = probe_accuracy(base, target, data, cfg, target_tag)
    payload = result.to_dict()
    payload["per_member"] = per_member
    return payload


def run_gdv(ckpt: Path, cfg: ExperimentConfig, out_csv: Path, member: int = 0, data: PreparedData | None = None) -> GDVReport:
    ensemble, meta = load_checkpoint(ckpt)
    if not 0 <= member < len(ensemble):
        raise ConfigError(f"member {member} out of range for a {len(ensemble)}-member checkpoint")
    if data is None:
        data = prepare_data(load_corpus(cfg), cfg.seed, ensemble.spec.segment_len)
    report = layerwise_gdv(ensemble.members[member], data.eval_segments, model_tag=meta["extra"].get("tag", ""))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_csv)
    report.write_json(out_csv.with_suffix(".json"))
    plot_gdv([report], out_csv.with_suffix(".png"))
    return report


SWEEP_COLUMNS = ("beta", "lambda1", "lambda2", "f1_avg", "f1_nd", "f1_d", "probe_accuracy")


def run_sweep(
    cfg: ExperimentConfig, betas: Sequence[float] = DEFAULT_BETAS, lambda2: float | None = None, out_dir: Path | None = None
) -> list[dict]:
    """One train+eval per beta with lambda1 = beta * lambda2; CSV sorted by beta descending."""
    if not betas:
        raise ConfigError("beta list is empty")
    if any(b <= 0 for b in betas):
        raise ConfigError("beta values must be positive")
    lambda2 = cfg.lambda2 if lambda2 is None else lambda2
    if lambda2 <= 0:
        raise ConfigError("lambda2 must be > 0 for a beta sweep")
    out = ensure_writable(out_dir or cfg.output_dir)
    data = prepare_data(load_corpus(cfg), cfg.seed, cfg.model.segment_len)
    base_report = run_train(cfg, "baseline", out_dir=out, data=data)
    base_ckpt = Path(base_report["checkpoint"])
    rows = []
    for beta in sorted(set(betas), reverse=True):
        adv = AdversarialConfig.from_beta(beta, lambda2, cfg.head_mode)
        rep = run_train(cfg, "nusd", baseline_ckpt=base_ckpt, out_dir=out, data=data, adv=adv, tag=f"nusd_beta{beta:g}")
        rows.append(
            {
                "beta": beta,
                "lambda1": adv.lambda1,
                "lambda2": adv.lambda2,
                "f1_avg": rep["f1"]["f1_avg"],
                "f1_nd": rep["f1"]["f1_nd"],
                "f1_d": rep["f1"]["f1_d"],
                "probe_accuracy": rep["probe_accuracy"],
            }
        )
    with open(out / "beta_sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    plot_beta_sweep(rows, out / "beta_sweep.png")
    return rows
