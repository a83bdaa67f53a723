import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import TINY_LEN, random_batch, tiny_spec
from disentangle_lab.autodiff import Tensor, backward, bce_with_logit, tsum
from disentangle_lab.data import Corpus, SegmentBatch, UtteranceRecord
from disentangle_lab.errors import ConfigError, DataError, NumericalError
from disentangle_lab.models import FE, FP, build_model
from disentangle_lab.training import (
    SGD,
    Adam,
    AdversarialConfig,
    EnsembleModel,
    TrainConfig,
    assemble_update,
    compute_update,
    iterate_batches,
    jsonl_logger,
    loss_bundle,
    make_optimizer,
    predict_speaker_level,
    train_ensemble,
    train_epoch,
)

# ---------------------------------------------------------------------------
# configuration


def test_adversarial_config_modes():
    assert AdversarialConfig.baseline().is_baseline
    usd = AdversarialConfig.usd(3e-3)
    assert usd.is_uniform and usd.lambda1 == usd.lambda2 == 3e-3
    nusd = AdversarialConfig(4e-5, 8e-6)
    assert math.isclose(nusd.beta(), 5.0)
    assert AdversarialConfig.from_beta(5, 4e-4) == AdversarialConfig(2e-3, 4e-4)
    assert nusd.weight(FE) == 4e-5 and nusd.weight(FP) == 8e-6


def test_adversarial_config_errors():
    with pytest.raises(ConfigError):
        AdversarialConfig(-1e-3, 0.0)
    with pytest.raises(ConfigError):
        AdversarialConfig(0.0, 0.0, head_mode="other")
    with pytest.raises(ConfigError):
        AdversarialConfig(1e-3, 0.0).beta()


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.optimizer, cfg.epochs, cfg.batch_size, cfg.ensemble_size) == (1e-4, "adam", 50, 16, 5)
    for bad in ({"learning_rate": 0}, {"optimizer": "rmsprop"}, {"ensemble_size": 0}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_loss_bundle_usd_identity():
    b = loss_bundle(0.7, 2.0, AdversarialConfig.usd(0.1))
    assert math.isclose(b.l_total, 0.7 - 0.1 * 2.0)


# ---------------------------------------------------------------------------
# assemble_update


def test_assemble_update_worked_example():
    cfg = AdversarialConfig(2e-3, 4e-4)
    g = assemble_update({"w": np.array(0.1)}, {"w": np.array(0.5)}, {"w": FE}, cfg)
    assert math.isclose(float(g["w"]), 0.099, rel_tol=0, abs_tol=1e-15)
    g = assemble_update({"w": np.array(0.1)}, {"w": np.array(0.5)}, {"w": FP}, cfg)
    assert math.isclose(float(g["w"]), 0.1 - 4e-4 * 0.5, abs_tol=1e-15)


def test_assemble_update_zero_weight_is_plain_gradient():
    rng = np.random.default_rng(0)
    gm = {"a": rng.standard_normal(3), "b": rng.standard_normal(2)}
    gs = {"a": rng.standard_normal(3), "b": rng.standard_normal(2)}
    out = assemble_update(gm, gs, {"a": FE, "b": FP}, AdversarialConfig.baseline())
    for k in gm:
        np.testing.assert_array_equal(out[k], gm[k])


def test_assemble_update_key_mismatch():
    with pytest.raises(ConfigError):
        assemble_update({"a": np.zeros(1)}, {"b": np.zeros(1)}, {"a": FE}, AdversarialConfig())
    with pytest.raises(ConfigError):
        assemble_update({"a": np.zeros(1)}, {"a": np.zeros(1)}, {"a": FE, "b": FP}, AdversarialConfig())


def test_cooperative_head_descends_speaker_loss():
    gm = {"speaker_prediction.weight": np.array([0.1]), "embedding.weight": np.array([0.2])}
    gs = {"speaker_prediction.weight": np.array([0.5]), "embedding.weight": np.array([0.3])}
    tags = {"speaker_prediction.weight": FP, "embedding.weight": FP}
    out = assemble_update(gm, gs, tags, AdversarialConfig(1e-2, 1e-2, "cooperative_head"))
    np.testing.assert_array_equal(out["speaker_prediction.weight"], [0.5])
    np.testing.assert_array_equal(out["embedding.weight"], [0.2 - 1e-2 * 0.3])
    literal = assemble_update(gm, gs, tags, AdversarialConfig(1e-2, 1e-2))
    np.testing.assert_array_equal(literal["speaker_prediction.weight"], [0.1 - 1e-2 * 0.5])


# ---------------------------------------------------------------------------
# model-level reductions


def usd_reference(step, lam):
    return {n: step.grads_mdd[n] - lam * step.grads_spk[n] for n in step.grads_mdd}


@pytest.mark.parametrize("arch", ["ecapa_lite", "depaudionet_lite"])
def test_nusd_with_equal_weights_is_usd(arch):
    for trial in range(5):
        rng = np.random.default_rng(trial)
        model = build_model(tiny_spec(architecture=arch, seed=trial))
        batch = random_batch(rng, 4)
        lam = float(rng.uniform(1e-4, 1e-1))
        step = compute_update(model, batch, AdversarialConfig(lam, lam))
        ref = usd_reference(step, lam)
        usd = compute_update(model, batch, AdversarialConfig.usd(lam))
        for n in ref:
            assert step.update[n].tobytes() == ref[n].tobytes()
            assert usd.update[n].tobytes() == ref[n].tobytes()


def test_component_isolation():
    model = build_model(tiny_spec(seed=4))
    batch = random_batch(np.random.default_rng(4), 6)
    fe, fp = model.group(FE), model.group(FP)
    lam1, lam2 = 1e-3, 3e-4
    base = compute_update(model, batch, AdversarialConfig(lam1, lam2))
    double1 = compute_update(model, batch, AdversarialConfig(2 * lam1, lam2))
    double2 = compute_update(model, batch, AdversarialConfig(lam1, 2 * lam2))
    # frozen batch and parameters: the raw gradients do not depend on the weights
    for n in model.params:
        assert double1.grads_spk[n].tobytes() == base.grads_spk[n].tobytes()
        assert double2.grads_mdd[n].tobytes() == base.grads_mdd[n].tobytes()
    for n in fe:
        np.testing.assert_array_equal(double2.update[n], base.update[n])
    for n in fp:
        np.testing.assert_array_equal(double1.update[n], base.update[n])

    # the speaker contribution g_MDD - g, assembled in float64 to keep it exact
    gm = {n: g.astype(np.float64) for n, g in base.grads_mdd.items()}
    gs = {n: g.astype(np.float64) for n, g in base.grads_spk.items()}

    def contribution(cfg):
        upd = assemble_update(gm, gs, model.tags, cfg)
        return {n: gm[n] - upd[n] for n in gm}

    c = contribution(AdversarialConfig(lam1, lam2))
    c1 = contribution(AdversarialConfig(2 * lam1, lam2))
    c2 = contribution(AdversarialConfig(lam1, 2 * lam2))
    for group, doubled, other in ((fe, c1, c2), (fp, c2, c1)):
        num = np.concatenate([doubled[n].ravel() for n in group])
        den = np.concatenate([c[n].ravel() for n in group])
        mask = den != 0
        assert mask.any()
        np.testing.assert_allclose(num[mask] / den[mask], 2.0, rtol=1e-6)
        assert abs(np.linalg.norm(num) / np.linalg.norm(den) - 2.0) < 1e-6
        for n in group:
            np.testing.assert_array_equal(other[n], c[n])


def test_speaker_gradient_norm_scales_with_lambda1():
    batch = random_batch(np.random.default_rng(5), 4)
    cfg = TrainConfig(learning_rate=1e-3, optimizer="sgd", batch_size=4, epochs=1)
    stats = []
    for lam1 in (1e-4, 2e-4):
        model = build_model(tiny_spec(seed=5))
        stats.append(train_epoch(model, [batch], AdversarialConfig(lam1, 1e-4), cfg))
    assert abs(stats[1].adv_grad_norm_fe / stats[0].adv_grad_norm_fe - 2.0) < 1e-6
    assert stats[1].adv_grad_norm_fp == stats[0].adv_grad_norm_fp


def detached_trainer_step(model, batch, optimizer):
    """Supervised step with no speaker branch at all."""
    out = model.forward(batch.segments)
    loss = bce_with_logit(out.mdd_logit, batch.condition)
    model.zero_grad()
    backward(loss)
    grads = {n: np.zeros_like(p.data) if p.grad is None else p.grad for n, p in model.params.items()}
    model.zero_grad()
    optimizer.step(model.params, grads)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_zero_weights_match_detached_trainer(optimizer):
    rng = np.random.default_rng(6)
    batches = [random_batch(rng, 3) for _ in range(5)]
    cfg = TrainConfig(learning_rate=1e-2, optimizer=optimizer, batch_size=3)
    adv_model = build_model(tiny_spec(seed=6))
    plain_model = build_model(tiny_spec(seed=6))
    train_epoch(adv_model, batches, AdversarialConfig.baseline(), cfg)
    opt = make_optimizer(cfg)
    for b in batches:
        detached_trainer_step(plain_model, b, opt)
    for n in adv_model.params:
        assert adv_model.params[n].data.tobytes() == plain_model.params[n].data.tobytes()


def test_sgd_step_by_hand():
    # L = w . x on a two-parameter linear model: dL/dw = x
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    x = np.array([3.0, -4.0])
    backward(tsum(w * x))
    SGD(0.1).step({"w": w}, {"w": w.grad})
    np.testing.assert_allclose(w.data, [1.0 - 0.3, 2.0 + 0.4], rtol=0, atol=1e-15)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.5, -0.5]), requires_grad=True)
    Adam(0.01).step({"p": p}, {"p": np.array([2.0, -3.0])})
    np.testing.assert_allclose(p.data, [0.49, -0.49], atol=1e-8)


def test_nan_aborts_with_layer_name():
    model = build_model(tiny_spec())
    model.params["se_res2_2.tdnn1.weight"].data[:] = np.nan
    with pytest.raises(NumericalError) as exc:
        compute_update(model, random_batch(np.random.default_rng(0), 2), AdversarialConfig(1e-3, 1e-3))
    assert exc.value.layer == "se_res2_2"
    assert exc.value.exit_code == 4


def test_train_epoch_requires_batches():
    with pytest.raises(DataError):
        train_epoch(build_model(tiny_spec()), [], AdversarialConfig(), TrainConfig())


def test_iterate_batches_covers_every_segment_once():
    batch = random_batch(np.random.default_rng(1), 11)
    seen = np.concatenate([b.utterance for b in iterate_batches(batch, 4, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == list(range(11))


# ---------------------------------------------------------------------------
# ensembles


@pytest.fixture(scope="module")
def tiny_ensembles(tiny_corpus, tiny_pool, tmp_path_factory):
    cfg = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=4, ensemble_size=3, seed=9)
    pool = tiny_pool
    log = tmp_path_factory.mktemp("log") / "train.jsonl"
    a = train_ensemble(tiny_corpus, tiny_spec(), AdversarialConfig(1e-4, 2e-5), cfg, jsonl_logger(log), pool=pool)
    b = train_ensemble(tiny_corpus, tiny_spec(), AdversarialConfig(1e-4, 2e-5), cfg, pool=pool)
    return a, b, log


def test_ensemble_is_deterministic(tiny_ensembles):
    a, b, _ = tiny_ensembles
    assert len(a) == 3 and a.member_seeds == b.member_seeds
    for ma, mb in zip(a.members, b.members):
        for n in ma.params:
            assert ma.params[n].data.tobytes() == mb.params[n].data.tobytes()


def test_ensemble_subsets_differ_and_are_balanced(tiny_ensembles, tiny_pool):
    a, _, _ = tiny_ensembles
    sets = [tuple(s.tolist()) for s in a.subset_indices]
    assert len(set(sets)) == len(sets)
    for idx in a.subset_indices:
        cond = tiny_pool.condition[idx]
        assert (cond == 1).sum() == (cond == 0).sum() == min((tiny_pool.condition == 1).sum(), (tiny_pool.condition == 0).sum())
    assert len(set(a.member_seeds)) == len(a.member_seeds)


def test_training_log_records(tiny_ensembles):
    _, _, log = tiny_ensembles
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(records) == 3
    assert all(set(r) == {"member", "epoch", "l_mdd", "l_spk", "grad_norm_fe", "grad_norm_fp"} for r in records)
    assert [r["member"] for r in records] == [0, 1, 2]


def test_ensemble_needs_both_classes():
    recs = [UtteranceRecord(f"s{i}", 0, "train", TINY_LEN, audio=np.zeros(TINY_LEN, np.float32)) for i in range(3)]
    with pytest.raises(DataError):
        train_ensemble(Corpus(recs), tiny_spec(), AdversarialConfig(), TrainConfig(epochs=1))


def test_default_ensemble_size():
    assert TrainConfig().ensemble_size == 5


# ---------------------------------------------------------------------------
# speaker-level prediction


class ColumnMember:
    """Stand-in member whose MDD logit is column ``col`` of each segment."""

    def __init__(self, col):
        self.col = col

    def forward(self, segments):
        return SimpleNamespace(mdd_logit=Tensor(np.asarray(segments)[:, self.col].astype(np.float64)))


def logit(p):
    return math.log(p / (1 - p))


def segments_for(rows, speakers):
    n = len(rows)
    seg = np.zeros((n, 4))
    seg[:, : len(rows[0])] = rows
    return SegmentBatch(
        segments=seg,
        condition=np.zeros(n, dtype=np.int64),
        speaker=np.zeros(n, dtype=np.int64),
        utterance=np.arange(n),
        offset=np.zeros(n, dtype=np.int64),
        speaker_ids=np.array(speakers, dtype=object),
    )


def fake_ensemble(n_members):
    return EnsembleModel([ColumnMember(i) for i in range(n_members)], list(range(n_members)))


def test_threshold_boundary_is_positive():
    out = predict_speaker_level(fake_ensemble(1), segments_for([[0.0]], ["a"]))
    assert out == {"a": (0.5, 1)}


def test_mean_over_members_and_segments():
    rows = [[logit(0.2), logit(0.6)], [logit(0.4), logit(0.8)]]
    out = predict_speaker_level(fake_ensemble(2), segments_for(rows, ["a", "a"]))
    assert math.isclose(out["a"][0], 0.5, abs_tol=1e-12) and out["a"][1] == 1


def test_segment_order_does_not_matter():
    rng = np.random.default_rng(2)
    rows = rng.standard_normal((12, 2)).tolist()
    speakers = ["a", "b", "c"] * 4
    ens = fake_ensemble(2)
    ref = predict_speaker_level(ens, segments_for(rows, speakers))
    perm = rng.permutation(12)
    out = predict_speaker_level(ens, segments_for([rows[i] for i in perm], [speakers[i] for i in perm]))
    for s in ref:
        assert math.isclose(ref[s][0], out[s][0], rel_tol=1e-12) and ref[s][1] == out[s][1]


def test_speaker_without_segments():
    with pytest.raises(DataError):
        predict_speaker_level(fake_ensemble(1), segments_for([[0.0]], ["a"]), speakers=["a", "b"])
