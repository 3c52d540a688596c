"""Device encoders (extractor + compressor) and the server-side decoder."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import torch
from torch import nn

from .channel import ChannelSpec, NoiseSource, transmit
from .errors import CheckpointError, NumericError, ShapeError

CHECKPOINT_FORMAT = 1
GROUPS = ("sre", "cce", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    a_in: int = 64
    cr: float = 0.1
    num_classes: int = 5
    k_devices: int = 4
    view_shape: tuple[int, int, int] = (3, 16, 16)
    mode: Literal["analog", "digital"] = "analog"
    z_min: float = -1.0
    z_max: float = 1.0
    hidden: int = 256
    profile: Literal["desk", "resnet50"] = "desk"
    shared_encoder: bool = True

    def __post_init__(self):
        if not 0 < self.cr <= 1:
            raise ValueError(f"compression rate must lie in (0, 1], got {self.cr}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.mode not in ("analog", "digital"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.a_out < 1:
            raise ValueError("compression leaves no transmitted features")

    @property
    def a_out(self) -> int:
        # round half up
        return int(self.cr * self.a_in + 0.5)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_shape"] = list(self.view_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["view_shape"] = tuple(d["view_shape"])
        return cls(**d)


class PredictionDist:
    """Batch of class distributions with their hard decisions."""

    def __init__(self, probs: torch.Tensor):
        self.probs = probs

    @property
    def label(self) -> torch.Tensor:
        return predict_label(self.probs)[0]

    @property
    def one_hot(self) -> torch.Tensor:
        return predict_label(self.probs)[1]

    @property
    def confidence(self) -> torch.Tensor:
        return self.probs.max(-1).values


def predict_label(probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Argmax label and its one-hot; ties go to the lowest index."""
    label = torch.argmax(probs, dim=-1)
    oh = nn.functional.one_hot(label, probs.shape[-1]).to(probs.dtype)
    return label, oh


class DeskExtractor(nn.Module):
    """Small conv stack ending in an affine projection to ``a_in`` features."""

    def __init__(self, view_shape, a_in: int):
        super().__init__()
        ch, h, w = view_shape
        self.conv = nn.Sequential(
            nn.Conv2d(ch, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        with torch.no_grad():
            n_flat = self.conv(torch.zeros(1, ch, h, w)).numel()
        self.proj = nn.Linear(n_flat, a_in)

    def forward(self, x):
        return self.proj(self.conv(x).flatten(1))


def _resnet50_extractor():
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.fc = nn.Identity()
    return net


class ChannelEncoder(nn.Module):
    """ReLU followed by one affine layer, then power normalisation or bounding."""

    def __init__(self, a_in: int, a_out: int, mode: str, z_min: float, z_max: float):
        super().__init__()
        self.linear = nn.Linear(a_in, a_out)
        self.mode = mode
        self.z_min, self.z_max = z_min, z_max

    def forward(self, f):
        u = self.linear(torch.relu(f))
        if self.mode == "analog":
            return power_normalize(u)
        return self.z_min + (self.z_max - self.z_min) * (torch.tanh(u) + 1) / 2


def power_normalize(u: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Scale each vector (last axis) to unit average power."""
    power = (u**2).mean(-1, keepdim=True)
    return u / torch.sqrt(power + eps)


class Decoder(nn.Module):
    def __init__(self, n_in: int, hidden: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_in, hidden), nn.ReLU(), nn.Linear(hidden, num_classes))

    def forward(self, z):
        return torch.softmax(self.net(z), dim=-1)


@dataclass
class ForwardResult:
    z: torch.Tensor  # batch x K x a_out, transmitted
    z_hat: torch.Tensor  # batch x (K * a_out), received and concatenated
    probs: torch.Tensor  # batch x C


class EdgeModel(nn.Module):
    """K device encoders, the channel, and the server decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n_enc = 1 if config.shared_encoder else config.k_devices

        def make_sre():
            if config.profile == "resnet50":
                return _resnet50_extractor()
            return DeskExtractor(config.view_shape, config.a_in)

        self.sre = nn.ModuleList(make_sre() for _ in range(n_enc))
        self.cce = nn.ModuleList(
            ChannelEncoder(config.a_in, config.a_out, config.mode, config.z_min, config.z_max)
            for _ in range(n_enc)
        )
        self.decoder = Decoder(config.k_devices * config.a_out, config.hidden, config.num_classes)

    def _enc(self, k: int) -> int:
        return 0 if self.config.shared_encoder else k

    def extract(self, views: torch.Tensor, k: int = 0) -> torch.Tensor:
        if tuple(views.shape[-3:]) != tuple(self.config.view_shape):
            raise ShapeError(f"view shape {tuple(views.shape[-3:])} != {self.config.view_shape}")
        return self.sre[self._enc(k)](views)

    def encode(self, views: torch.Tensor) -> torch.Tensor:
        """Views (batch x K x Ch x H x W) to transmitted codes (batch x K x a_out)."""
        if views.ndim != 5 or views.shape[1] != self.config.k_devices:
            raise ShapeError(f"expected batch x {self.config.k_devices} x view, got {tuple(views.shape)}")
        codes = [
            self.cce[self._enc(k)](self.extract(views[:, k], k))
            for k in range(self.config.k_devices)
        ]
        return torch.stack(codes, dim=1)

    def decode(self, z_concat: torch.Tensor) -> torch.Tensor:
        expected = self.config.k_devices * self.config.a_out
        if z_concat.shape[-1] != expected:
            raise ShapeError(f"decoder input has length {z_concat.shape[-1]}, expected {expected}")
        return self.decoder(z_concat)

    def forward(
        self,
        views: torch.Tensor,
        channel: ChannelSpec | None = None,
        noise: NoiseSource | None = None,
    ) -> ForwardResult:
        z = self.encode(views)
        received = z if channel is None else transmit(z, channel, noise, self.training)
        z_hat = received.flatten(1)
        return ForwardResult(z=z, z_hat=z_hat, probs=self.decode(z_hat))

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "sre": list(self.sre.parameters()),
            "cce": list(self.cce.parameters()),
            "decoder": list(self.decoder.parameters()),
        }

    def clone(self) -> "EdgeModel":
        return copy.deepcopy(self)


def group_gradients(loss: torch.Tensor, model: EdgeModel) -> dict[str, list[torch.Tensor]]:
    """Gradients of ``loss`` for every parameter, split by group."""
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    groups = model.param_groups()
    flat = [p for g in GROUPS for p in groups[g]]
    grads = torch.autograd.grad(loss, flat, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(flat, grads)]
    out, i = {}, 0
    for g in GROUPS:
        n = len(groups[g])
        out[g] = list(grads[i : i + n])
        i += n
    return out


def params_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: EdgeModel, path, seed: int, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": int(seed),
        "groups": {g: {k: v for k, v in state.items() if k.startswith(g + ".")} for g in GROUPS},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[EdgeModel, dict]:
    """Load a checkpoint; raises :class:`CheckpointError` on any mismatch."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")
        config = ModelConfig.from_dict(payload["config"])
    except CheckpointError:
        raise
    except Exception as exc:  # corrupted archive, missing keys, bad config
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if expect is not None:
        for key in ("a_in", "a_out", "num_classes", "k_devices", "mode", "view_shape"):
            if getattr(expect, key) != getattr(config, key):
                raise CheckpointError(
                    f"checkpoint {key}={getattr(config, key)!r} does not match {getattr(expect, key)!r}"
                )
    model = EdgeModel(config)
    state = {k: v for g in GROUPS for k, v in payload["groups"].get(g, {}).items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter shapes do not match metadata: {exc}") from exc
    meta = {"seed": payload["seed"], "extra": payload.get("extra", {})}
    return model, meta
