"""End-to-end pipelines shared by the CLI and the acceptance fixtures."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import ExperimentConfig, replace
from .data import DomainDataset, ShiftSpec, load_archive, load_image_folder, synth_shift_dataset
from .evalkit import Evaluator
from .model import EdgeModel
from .trainer import TrainResult, build_model, evaluate, train_step1, train_step2

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def shift_spec(cfg: ExperimentConfig) -> ShiftSpec:
    d = cfg.data
    return ShiftSpec(
        rotation_deg=d.rotation_deg,
        translation=tuple(d.translation),
        color_shift=tuple(d.color_shift),
        layout=d.layout,
        canvas=d.canvas,
        view_size=d.view_size,
    )


def load_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset, dict]:
    """Source and target datasets named by ``cfg.data``.

    Priority: image directories, then an archive, then the synthetic task.
    """
    d = cfg.data
    if d.source_dir:
        source, names = load_image_folder(d.source_dir, "source", d.k_devices, d.view_size, d.canvas)
        target, _ = load_image_folder(d.target_dir, "target", d.k_devices, d.view_size, d.canvas, names)
        return source, target, {"kind": "folders", "class_names": names}
    if d.archive:
        source, target, header = load_archive(d.archive)
        return source, target, {"kind": "archive", **header}
    spec = shift_spec(cfg)
    source, target = synth_shift_dataset(spec, d.n_per_class, d.num_classes, d.k_devices, d.data_seed)
    meta = {"kind": "synthetic", "seed": d.data_seed, "n_per_class": d.n_per_class, "shift": spec.to_dict()}
    return source, target, meta


def new_model(cfg: ExperimentConfig, num_classes: int, seed: int | None = None) -> EdgeModel:
    model = build_model(cfg.model_config(num_classes), cfg.seed if seed is None else seed)
    return model.to(DTYPES[cfg.model.dtype])


def run_step1(
    cfg: ExperimentConfig, source: DomainDataset, target: DomainDataset, lam: float | None = None
) -> TrainResult:
    """Train from scratch under the source channel; ``lam=0`` gives the source-only model."""
    if lam is not None:
        cfg = replace(cfg, train={"lam": lam})
    model = new_model(cfg, source.class_count)
    return train_step1(cfg.plan(), source, target, model, cfg.source_channel())


def run_step2(
    cfg: ExperimentConfig,
    source: DomainDataset,
    target: DomainDataset,
    adapted: EdgeModel,
    target_snr: float | None = None,
) -> TrainResult:
    return train_step2(
        cfg.plan(), source, target, adapted, cfg.source_channel(), cfg.target_channel(target_snr)
    )


@dataclass
class MethodModels:
    test_d: EdgeModel | None = None
    s1: EdgeModel | None = None
    students: dict[float, EdgeModel] = field(default_factory=dict)


@dataclass
class PipelineEvaluator:
    """Picklable sweep evaluator over target SNR or compression rate.

    For an SNR sweep the source-only and step-1 models are trained once per
    seed and re-evaluated at every SNR, while the full method fine-tunes a
    student for each SNR. A CR sweep retrains everything per point at the
    configured target SNR.
    """

    cfg: ExperimentConfig
    axis: str = "snr"
    methods: tuple[str, ...] = ("DASEIN", "DASEIN-S1", "Test-d")
    _cache: dict = field(default_factory=dict, repr=False)

    def _domains(self):
        if "domains" not in self._cache:
            self._cache["domains"] = load_domains(self.cfg)[:2]
        return self._cache["domains"]

    def _models(self, cfg: ExperimentConfig, key) -> MethodModels:
        if key not in self._cache:
            source, target = self._domains()
            mm = MethodModels()
            if "Test-d" in self.methods:
                mm.test_d = run_step1(cfg, source, target, lam=0.0).model
            if {"DASEIN", "DASEIN-S1"} & set(self.methods):
                mm.s1 = run_step1(cfg, source, target).model
            self._cache[key] = mm
        return self._cache[key]

    def __call__(self, value: float, seed: int) -> dict[str, float]:
        cfg = replace(self.cfg, seed=seed, train={"eval_every": 0})
        if self.axis == "snr":
            snr = value
            mm = self._models(cfg, ("seed", seed))
        elif self.axis == "cr":
            cfg = replace(cfg, model={"cr": value})
            snr = cfg.channel.snr_target
            mm = self._models(cfg, ("cr", value, seed))
        else:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        source, target = self._domains()
        channel = cfg.target_channel(snr)
        eval_seed = seed * 1000 + 17
        out = {}
        draws = cfg.train.eval_draws
        if "Test-d" in self.methods:
            out["Test-d"] = evaluate(mm.test_d, target, channel, eval_seed, draws)[0]
        if "DASEIN-S1" in self.methods:
            out["DASEIN-S1"] = evaluate(mm.s1, target, channel, eval_seed, draws)[0]
        if "DASEIN" in self.methods:
            student = run_step2(cfg, source, target, mm.s1, snr).model
            out["DASEIN"] = evaluate(student, target, channel, eval_seed, draws)[0]
        return out


def pipeline_evaluator(cfg: ExperimentConfig, axis: str, methods=None) -> Evaluator:
    return PipelineEvaluator(cfg, axis, tuple(methods) if methods else PipelineEvaluator.methods)
