import csv
import dataclasses

import numpy as np
import pytest
import torch

from edgeadapt import trainer
from edgeadapt.channel import ChannelSpec
from edgeadapt.data import DomainDataset, ShiftSpec, synth_shift_dataset
from edgeadapt.errors import NumericError
from edgeadapt.losses import LossWeights, warmup_delta
from edgeadapt.model import ModelConfig, params_checksum
from edgeadapt.trainer import (
    TrainPlan,
    build_model,
    evaluate,
    lr_anneal,
    make_optimizer,
    seed_streams,
    sgd_step,
    train_step1,
    train_step2,
    write_metrics_csv,
)

CFG = ModelConfig(a_in=16, cr=0.25, num_classes=3, k_devices=4, hidden=32)
CH = ChannelSpec.uniform(10.0, 4)
CH_LOW = ChannelSpec.uniform(-5.0, 4)


@pytest.fixture(scope="module")
def domains():
    return synth_shift_dataset(ShiftSpec(rotation_deg=45.0), 8, 3, 4, 0)


def plan(**kw):
    base = dict(epochs=2, finetune_epochs=2, batch_size=8, seed=0, eval_draws=2)
    base.update(kw)
    return TrainPlan(**base)


def flat(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


# -- schedules and optimiser ---------------------------------------------------


def test_lr_anneal_examples():
    assert lr_anneal(0.01, 0, 100) == 0.01
    assert lr_anneal(1.0, 100, 100) == pytest.approx(11**-0.75, abs=1e-12)
    # 11^-0.75 = exp(-0.75 ln 11) = 0.165560...
    assert 11**-0.75 == pytest.approx(0.165560, abs=1e-6)
    assert lr_anneal(0.01, 50, 100) == pytest.approx(0.01 / 6**0.75, abs=1e-12)
    assert 0.01 / 6**0.75 == pytest.approx(0.0026084, abs=1e-7)
    etas = [lr_anneal(1e-3, e, 20) for e in range(21)]
    assert all(b < a for a, b in zip(etas, etas[1:]))
    with pytest.raises(ValueError):
        lr_anneal(0.1, 0, 0)


def test_plan_defaults():
    p = TrainPlan()
    assert (p.epochs, p.finetune_epochs, p.batch_size) == (100, 20, 16)
    assert p.lr0 == {"sre": 1e-3, "cce": 1e-2, "decoder": 1e-2}
    assert (p.momentum, p.weight_decay) == (0.9, 5e-4)
    assert TrainPlan.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        TrainPlan(lr0={"sre": 1.0})


def sgd_setup(momentum, wd):
    model = build_model(CFG, 0).double()
    p = plan(momentum=momentum, weight_decay=wd)
    opt = make_optimizer(model, p)
    grads = {g: [torch.ones_like(x) for x in ps] for g, ps in model.param_groups().items()}
    return model, opt, grads


def test_sgd_plain_descent():
    model, opt, grads = sgd_setup(0.0, 0.0)
    before = {g: [x.detach().clone() for x in ps] for g, ps in model.param_groups().items()}
    lrs = {"sre": 0.1, "cce": 0.2, "decoder": 0.3}
    sgd_step(opt, grads, lrs)
    for g, ps in model.param_groups().items():
        for x, x0 in zip(ps, before[g]):
            assert torch.allclose(x.detach(), x0 - lrs[g], atol=1e-15)


def test_sgd_momentum_unroll():
    model, opt, grads = sgd_setup(0.9, 0.0)
    lrs = {"sre": 0.01, "cce": 0.01, "decoder": 0.01}
    sgd_step(opt, grads, lrs)
    mid = flat(model).clone()
    sgd_step(opt, grads, lrs)
    step = mid - flat(model)
    assert torch.allclose(step, torch.full_like(step, 1.9 * 0.01), atol=1e-15)


def test_sgd_weight_decay_is_l2_term():
    model, opt, grads = sgd_setup(0.0, 0.5)
    x0 = flat(model).clone()
    sgd_step(opt, grads, {"sre": 0.1, "cce": 0.1, "decoder": 0.1})
    assert torch.allclose(flat(model), x0 - 0.1 * (1.0 + 0.5 * x0), atol=1e-14)


def test_seed_streams_are_distinct_and_stable():
    s = seed_streams(5)
    assert len(set(s.values())) == 4
    assert s == seed_streams(5)
    assert s != seed_streams(6)


def test_build_model_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_model(CFG, 3)
    assert torch.equal(torch.rand(1), expected)
    assert params_checksum(build_model(CFG, 3)) == params_checksum(build_model(CFG, 3))


# -- training loops ------------------------------------------------------------


def test_step1_reproducible(domains):
    src, tgt = domains
    a = train_step1(plan(), src, tgt, build_model(CFG, 0), CH)
    b = train_step1(plan(), src, tgt, build_model(CFG, 0), CH)
    assert a.history == b.history
    assert params_checksum(a.model) == params_checksum(b.model)
    assert len(a.history) == 2
    row = a.history[1]
    assert row["delta"] == warmup_delta(1, 2)
    assert row["lr_sre"] == pytest.approx(lr_anneal(1e-3, 1, 2))
    assert 0 <= row["target_acc"] <= 1


def test_step1_without_adaptation_is_plain_ce(domains):
    src, tgt = domains
    res = train_step1(plan(weights=LossWeights(lam=0.0)), src, tgt, build_model(CFG, 0), CH)
    for row in res.history:
        assert row["loss"] == pytest.approx(row["ce"], abs=1e-12)


def test_warmup_zeroes_adaptation_on_first_epoch(domains):
    src, tgt = domains
    a = train_step1(plan(epochs=1), src, tgt, build_model(CFG, 0), CH)
    b = train_step1(plan(epochs=1, weights=LossWeights(lam=5.0)), src, tgt, build_model(CFG, 0), CH)
    assert a.history[0]["delta"] == 0.0
    assert b.history[0]["uda"] > 0
    assert params_checksum(a.model) == params_checksum(b.model)


def test_channel_noise_enters_training_loss(domains):
    src, tgt = domains
    noisy = train_step1(plan(epochs=1, eval_every=0), src, tgt, build_model(CFG, 0), ChannelSpec.uniform(-10.0, 4))
    clean = train_step1(
        plan(epochs=1, eval_every=0), src, tgt, build_model(CFG, 0), ChannelSpec.uniform(-10.0, 4, noiseless=True)
    )
    assert noisy.history[0]["loss"] != clean.history[0]["loss"]


def test_step1_digital_mode(domains):
    src, tgt = domains
    cfg = dataclasses.replace(CFG, mode="digital")
    res = train_step1(plan(epochs=1), src, tgt, build_model(cfg, 0), ChannelSpec.uniform(5.0, 4, "digital"))
    assert np.isfinite(res.history[0]["loss"])


def test_non_finite_loss_aborts(domains):
    src, tgt = domains
    bad = DomainDataset(np.full_like(src.views, np.nan), src.labels, 3, "source")
    with pytest.raises(NumericError):
        train_step1(plan(epochs=1), bad, tgt, build_model(CFG, 0), CH)


def test_step2_teacher_untouched_and_student_moves(domains):
    src, tgt = domains
    adapted = train_step1(plan(eval_every=0), src, tgt, build_model(CFG, 0), CH).model
    before = params_checksum(adapted)
    res = train_step2(plan(), src, tgt, adapted, CH, CH_LOW)
    assert params_checksum(adapted) == before
    assert params_checksum(res.model) != before
    assert len(res.history) == 2
    for row in res.history:
        assert 0.0 <= row["mask_fraction"] <= 1.0
        assert row["kd"] >= 0


def test_step2_zero_epochs_copies_through(domains):
    src, tgt = domains
    adapted = build_model(CFG, 1)
    res = train_step2(plan(finetune_epochs=0), src, tgt, adapted, CH, CH_LOW)
    assert res.history == []
    assert res.model is not adapted
    assert params_checksum(res.model) == params_checksum(adapted)


def test_step2_reproducible(domains):
    src, tgt = domains
    adapted = build_model(CFG, 2)
    a = train_step2(plan(), src, tgt, adapted, CH, CH_LOW)
    b = train_step2(plan(), src, tgt, adapted, CH, CH_LOW)
    assert a.history == b.history


# -- evaluation ----------------------------------------------------------------


def test_evaluate_draws_and_std(domains):
    src, _ = domains
    model = build_model(CFG, 0)
    mean, std = evaluate(model, src, ChannelSpec.uniform(-10.0, 4), seed=1, draws=5)
    assert 0 <= mean <= 1 and std >= 0
    assert evaluate(model, src, ChannelSpec.uniform(-10.0, 4), seed=1, draws=5) == (mean, std)
    m0, s0 = evaluate(model, src, ChannelSpec.uniform(-10.0, 4, noiseless=True), seed=1, draws=3)
    assert s0 == 0.0
    assert evaluate(model, src, None, draws=1) == (m0, 0.0)


def test_direct_deployment_on_identical_domain(domains):
    src, _ = domains
    model = train_step1(plan(eval_every=0, weights=LossWeights(lam=0.0)), src, domains[1], build_model(CFG, 0), CH).model
    same = DomainDataset(src.views, None, 3, "target", eval_labels=src.labels)
    high = ChannelSpec.uniform(60.0, 4)
    assert trainer.test_direct(model, same, high) == evaluate(model, src, high)


def test_metrics_csv(tmp_path, domains):
    src, tgt = domains
    res = train_step1(plan(), src, tgt, build_model(CFG, 0), CH)
    path = tmp_path / "m.csv"
    write_metrics_csv(res.history, path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == trainer.METRIC_FIELDS
    assert float(rows[1]["loss"]) == res.history[1]["loss"]
    assert rows[0]["kd"] == ""
