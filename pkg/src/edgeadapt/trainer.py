"""Step 1 (UDA) and step 2 (KD fine-tuning) training loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import ChannelSpec, NoiseSource
from .data import DomainDataset, make_paired_loader
from .errors import NumericError
from .losses import KernelSpec, LossWeights, loss_step1, loss_step2
from .model import GROUPS, EdgeModel, ModelConfig, params_checksum

log = logging.getLogger(__name__)

METRIC_FIELDS = [
    "phase", "epoch", "loss", "ce", "uda", "kd", "delta", "mask_fraction",
    "lr_sre", "lr_cce", "lr_decoder", "source_acc", "target_acc", "target_acc_std",
]


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 100
    finetune_epochs: int = 20
    batch_size: int = 16
    lr0: dict = field(default_factory=lambda: {"sre": 1e-3, "cce": 1e-2, "decoder": 1e-2})
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = LossWeights()
    kernel: KernelSpec = KernelSpec()
    seed: int = 0
    eval_draws: int = 5
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.finetune_epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 1, finetune_epochs >= 0, batch_size >= 1")
        if set(self.lr0) != set(GROUPS):
            raise ValueError(f"lr0 must give a rate for each of {GROUPS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["kernel"] = KernelSpec(**d.get("kernel", {}))
        return cls(**d)


def seed_streams(seed: int, names=("init", "shuffle", "noise", "eval")) -> dict[str, int]:
    """Independent integer sub-seeds for each named random stream."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_model(config: ModelConfig, seed: int) -> EdgeModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed_streams(seed)["init"])
        return EdgeModel(config)


def lr_anneal(eta0: float, epoch: float, total: int) -> float:
    """``eta0 / (1 + 10 e/E)^0.75``."""
    if total < 1:
        raise ValueError("total epochs must be >= 1")
    return eta0 / (1.0 + 10.0 * epoch / total) ** 0.75


def make_optimizer(model: EdgeModel, plan: TrainPlan) -> torch.optim.SGD:
    groups = model.param_groups()
    return torch.optim.SGD(
        [{"params": groups[g], "lr": plan.lr0[g], "name": g} for g in GROUPS],
        lr=plan.lr0["decoder"],
        momentum=plan.momentum,
        weight_decay=plan.weight_decay,
    )


def _set_lrs(optimizer: torch.optim.SGD, lrs: dict[str, float]) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lrs[group["name"]]


def sgd_step(optimizer: torch.optim.SGD, grads: dict[str, list[torch.Tensor]], lrs: dict[str, float]):
    """Momentum SGD update with a separate learning rate per parameter group.

    Weight decay enters as an additive L2 gradient term; the velocity buffer
    lives in the optimizer and persists across calls.
    """
    _set_lrs(optimizer, lrs)
    for group in optimizer.param_groups:
        for p, g in zip(group["params"], grads[group["name"]]):
            p.grad = g.detach().clone()
    optimizer.step()


def _to_tensor(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.tensor(a, dtype=dtype)


def _model_dtype(model: EdgeModel):
    return next(model.parameters()).dtype


@torch.no_grad()
def predict(
    model: EdgeModel,
    dataset: DomainDataset,
    channel: ChannelSpec | None,
    seed: int,
    batch_size: int = 256,
) -> np.ndarray:
    """Hard labels for every sample with one channel noise realisation."""
    was_training = model.training
    model.eval()
    noise = NoiseSource(seed, model.config.k_devices)
    dtype = _model_dtype(model)
    preds = []
    for i in range(0, len(dataset), batch_size):
        views = _to_tensor(dataset.views[i : i + batch_size], dtype)
        preds.append(model(views, channel, noise).probs.argmax(-1).numpy())
    model.train(was_training)
    return np.concatenate(preds)


def evaluate(
    model: EdgeModel,
    dataset: DomainDataset,
    channel: ChannelSpec | None,
    seed: int = 0,
    draws: int = 5,
) -> tuple[float, float]:
    """Accuracy mean and sample std over ``draws`` channel noise realisations."""
    from .evalkit import accuracy

    truth = dataset.truth
    if truth is None:
        raise ValueError("dataset has no labels to score against")
    seeds = np.random.SeedSequence(seed).generate_state(draws)
    accs = [accuracy(predict(model, dataset, channel, int(s)), truth) for s in seeds]
    std = float(np.std(accs, ddof=1)) if draws > 1 else 0.0
    return float(np.mean(accs)), std


def test_direct(
    source_model: EdgeModel, target: DomainDataset, channel: ChannelSpec, seed: int = 0, draws: int = 5
) -> tuple[float, float]:
    """Score the source-trained model on the target domain, no adaptation."""
    return evaluate(source_model, target, channel, seed, draws)


@dataclass
class TrainResult:
    model: EdgeModel
    history: list[dict]


def _check_finite(loss: torch.Tensor, phase: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"{phase}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def train_step1(
    plan: TrainPlan,
    source: DomainDataset,
    target: DomainDataset,
    model: EdgeModel,
    channel: ChannelSpec,
) -> TrainResult:
    """Domain adaptation under the source channel.

    Each epoch is a full pass of paired batches. The warm-up weight and the
    annealed learning rates are evaluated once per epoch at the count of
    completed epochs.
    """
    streams = seed_streams(plan.seed)
    noise = NoiseSource(streams["noise"], model.config.k_devices)
    optimizer = make_optimizer(model, plan)
    dtype = _model_dtype(model)
    history = []
    for epoch in range(plan.epochs):
        model.train()
        lrs = {g: lr_anneal(plan.lr0[g], epoch, plan.epochs) for g in GROUPS}
        sums = {"loss": 0.0, "ce": 0.0, "uda": 0.0}
        n = 0
        delta = 0.0
        for step, batch in enumerate(make_paired_loader(source, target, plan.batch_size, streams["shuffle"] + epoch)):
            xs = _to_tensor(batch.source_views, dtype)
            ys = torch.as_tensor(batch.source_labels)
            xt = _to_tensor(batch.target_views, dtype)
            out_s = model(xs, channel, noise)
            out_t = model(xt, channel, noise)
            terms = loss_step1(
                out_s.probs, ys, out_s.z_hat, out_t.probs, out_t.z_hat,
                plan.weights, plan.kernel, epoch, plan.epochs,
            )
            _check_finite(terms.total, "step1", epoch, step)
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            _set_lrs(optimizer, lrs)
            optimizer.step()
            sums["loss"] += terms.total.item()
            sums["ce"] += terms.ce.item()
            sums["uda"] += terms.uda.item()
            delta = terms.delta
            n += 1
        row = {"phase": "step1", "epoch": epoch, **{k: v / n for k, v in sums.items()},
               "kd": "", "delta": delta, "mask_fraction": "",
               **{f"lr_{g}": lrs[g] for g in GROUPS}}
        row.update(_epoch_eval(plan, model, source, target, channel, epoch, plan.epochs))
        history.append(row)
        log.info("step1 epoch %d loss %.4f target_acc %s", epoch, row["loss"], row["target_acc"])
    return TrainResult(model, history)


def train_step2(
    plan: TrainPlan,
    source: DomainDataset,
    target: DomainDataset,
    adapted: EdgeModel,
    teacher_channel: ChannelSpec,
    student_channel: ChannelSpec,
) -> TrainResult:
    """Distil the step-1 model into a student for the target channel.

    Teacher and student both start from ``adapted``. The teacher is frozen
    and sees the step-1 channel; only the student is updated.
    """
    teacher = adapted.clone().eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = adapted.clone()
    if plan.finetune_epochs == 0:
        return TrainResult(student, [])
    streams = seed_streams(plan.seed + 1)
    noise_st = NoiseSource(streams["noise"], student.config.k_devices)
    noise_tc = NoiseSource(streams["eval"], teacher.config.k_devices)
    optimizer = make_optimizer(student, plan)
    dtype = _model_dtype(student)
    checksum = params_checksum(teacher)
    history = []
    for epoch in range(plan.finetune_epochs):
        student.train()
        lrs = {g: lr_anneal(plan.lr0[g], epoch, plan.finetune_epochs) for g in GROUPS}
        sums = {"loss": 0.0, "ce": 0.0, "uda": 0.0, "kd": 0.0, "mask_fraction": 0.0}
        n = 0
        for step, batch in enumerate(make_paired_loader(source, target, plan.batch_size, streams["shuffle"] + epoch)):
            xs = _to_tensor(batch.source_views, dtype)
            ys = torch.as_tensor(batch.source_labels)
            xt = _to_tensor(batch.target_views, dtype)
            with torch.no_grad():
                p_tc = teacher(xt, teacher_channel, noise_tc).probs
            out_s = student(xs, student_channel, noise_st)
            out_t = student(xt, student_channel, noise_st)
            terms = loss_step2(
                out_s.probs, ys, out_s.z_hat, out_t.probs, out_t.z_hat, p_tc,
                plan.weights, plan.kernel,
            )
            _check_finite(terms.total, "step2", epoch, step)
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            _set_lrs(optimizer, lrs)
            optimizer.step()
            for k in sums:
                v = getattr(terms, "total" if k == "loss" else k)
                sums[k] += v.item() if isinstance(v, torch.Tensor) else float(v)
            n += 1
        row = {"phase": "step2", "epoch": epoch, **{k: v / n for k, v in sums.items()},
               "delta": "", **{f"lr_{g}": lrs[g] for g in GROUPS}}
        row.update(_epoch_eval(plan, student, source, target, student_channel, epoch, plan.finetune_epochs))
        history.append(row)
        log.info("step2 epoch %d loss %.4f target_acc %s", epoch, row["loss"], row["target_acc"])
    assert params_checksum(teacher) == checksum, "teacher parameters changed during fine-tuning"
    return TrainResult(student, history)


def _epoch_eval(plan, model, source, target, channel, epoch, total) -> dict:
    last = epoch == total - 1
    if plan.eval_every <= 0 or not (last or epoch % plan.eval_every == 0):
        return {"source_acc": "", "target_acc": "", "target_acc_std": ""}
    seed = seed_streams(plan.seed)["eval"] + epoch
    src, _ = evaluate(model, source, channel, seed, draws=1)
    row = {"source_acc": src, "target_acc": "", "target_acc_std": ""}
    if target.truth is not None:
        tgt, std = evaluate(model, target, channel, seed, draws=plan.eval_draws)
        row.update(target_acc=tgt, target_acc_std=std)
    return row


def write_metrics_csv(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row.get(k, "")) for k in METRIC_FIELDS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
