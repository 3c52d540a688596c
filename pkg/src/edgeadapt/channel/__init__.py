"""Device-to-server links, analog or digital, and their configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import torch

from .analog import awgn, concat_views, device_generators, snr_to_sigma
from .digital import QuantizerSpec, digital_infer_forward, digital_train_forward

__all__ = [
    "ChannelSpec",
    "QuantizerSpec",
    "NoiseSource",
    "awgn",
    "concat_views",
    "device_generators",
    "snr_to_sigma",
    "transmit",
]


@dataclass(frozen=True)
class ChannelSpec:
    """Per-device noise levels and transmission mode.

    ``snr_db`` is one value per device. ``noiseless`` is a test bypass that
    forces every sigma to zero.
    """

    snr_db: tuple[float, ...]
    mode: Literal["analog", "digital"] = "analog"
    quantizer: QuantizerSpec | None = None
    noiseless: bool = False

    def __post_init__(self):
        if self.mode not in ("analog", "digital"):
            raise ValueError(f"unknown channel mode {self.mode!r}")
        if (self.quantizer is not None) != (self.mode == "digital"):
            raise ValueError("a quantizer is required for digital mode and only there")
        if len(self.snr_db) == 0:
            raise ValueError("need at least one device SNR")

    @classmethod
    def uniform(
        cls,
        snr_db: float,
        k_devices: int,
        mode: str = "analog",
        quantizer: QuantizerSpec | None = None,
        noiseless: bool = False,
    ) -> "ChannelSpec":
        if mode == "digital" and quantizer is None:
            quantizer = QuantizerSpec()
        return cls((float(snr_db),) * k_devices, mode, quantizer, noiseless)

    @property
    def k_devices(self) -> int:
        return len(self.snr_db)

    @property
    def per_device_sigma(self) -> tuple[float, ...]:
        if self.noiseless:
            return (0.0,) * self.k_devices
        return tuple(snr_to_sigma(s) for s in self.snr_db)

    def with_snr(self, snr_db: float) -> "ChannelSpec":
        return ChannelSpec((float(snr_db),) * self.k_devices, self.mode, self.quantizer, self.noiseless)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = list(self.snr_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        q = d.get("quantizer")
        return cls(
            tuple(float(s) for s in d["snr_db"]),
            d.get("mode", "analog"),
            QuantizerSpec(**q) if q else None,
            bool(d.get("noiseless", False)),
        )


@dataclass
class NoiseSource:
    """Named per-device noise streams derived from one seed."""

    seed: int
    k_devices: int
    generators: list[torch.Generator] = field(init=False)

    def __post_init__(self):
        self.generators = device_generators(self.seed, self.k_devices)


def transmit(
    z: torch.Tensor,
    spec: ChannelSpec,
    noise: NoiseSource | None,
    training: bool,
) -> torch.Tensor:
    """Pass per-device codes ``z`` (batch x K x a_out) through the links.

    Digital links use the differentiable surrogate when ``training`` and the
    hard bit-level chain otherwise.
    """
    if z.shape[-2] != spec.k_devices:
        raise ValueError(f"got {z.shape[-2]} devices, channel has {spec.k_devices}")
    out: Sequence[torch.Tensor] = []
    for k, sigma in enumerate(spec.per_device_sigma):
        gen = noise.generators[k] if noise is not None else None
        zk = z[..., k, :]
        if spec.mode == "analog":
            out.append(awgn(zk, sigma, gen))
        elif training:
            out.append(digital_train_forward(zk, spec.quantizer, sigma, gen))
        else:
            out.append(digital_infer_forward(zk, spec.quantizer, sigma, gen))
    return torch.stack(out, dim=-2)
