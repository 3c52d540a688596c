"""Digital transceiver: uniform ADC, natural binary code, Gray QPSK and DAC.

The inference path runs the hard chain bit by bit. Training bypasses the
modem: the index is produced by a smooth sine-based rounding surrogate and
corrupted by real Gaussian noise of the same total power as the complex noise
of the inference path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..errors import ShapeError

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class QuantizerSpec:
    q_b: int = 2
    z_min: float = -1.0
    z_max: float = 1.0
    r: int = 3

    def __post_init__(self):
        if self.q_b < 1:
            raise ValueError(f"q_b must be >= 1, got {self.q_b}")
        if not self.z_min < self.z_max:
            raise ValueError(f"need z_min < z_max, got {self.z_min}, {self.z_max}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")

    @property
    def levels(self) -> int:
        return 2**self.q_b

    @property
    def step(self) -> float:
        """Reconstruction step between adjacent levels."""
        return (self.z_max - self.z_min) / (self.levels - 1)


def _check_range(z: torch.Tensor, spec: QuantizerSpec) -> None:
    # Closed interval: exact levels z_min/z_max must map to indices 0 and 2^q_b-1.
    if torch.any(z < spec.z_min) or torch.any(z > spec.z_max) or not torch.all(torch.isfinite(z)):
        raise ValueError(f"entries outside [{spec.z_min}, {spec.z_max}]")


def g_map(z: torch.Tensor, spec: QuantizerSpec) -> torch.Tensor:
    """Affine map of ``[z_min, z_max]`` onto ``[0, 2^q_b - 1]``."""
    _check_range(z, spec)
    return (z - spec.z_min) / (spec.z_max - spec.z_min) * (spec.levels - 1)


def dac(x: torch.Tensor, spec: QuantizerSpec) -> torch.Tensor:
    """Inverse of :func:`g_map`; accepts integer or real indices."""
    x = x if torch.is_floating_point(x) else x.to(torch.float64)
    return spec.z_min + x * (spec.z_max - spec.z_min) / (spec.levels - 1)


def quantize_index(z: torch.Tensor, spec: QuantizerSpec) -> torch.Tensor:
    """Nearest quantizer index; ties at .5 round away from zero."""
    g = g_map(z, spec)
    # g >= 0, so half-away-from-zero is floor(g + 0.5)
    idx = torch.floor(g + 0.5).to(torch.int64)
    return idx.clamp_(0, spec.levels - 1)


def encode_bits(z_id: torch.Tensor, q_b: int) -> torch.Tensor:
    """Fixed-width MSB-first natural binary code, flattened along the last axis."""
    z_id = torch.as_tensor(z_id, dtype=torch.int64)
    if torch.any(z_id < 0) or torch.any(z_id >= 2**q_b):
        raise ValueError(f"indices must lie in [0, {2**q_b - 1}]")
    shifts = torch.arange(q_b - 1, -1, -1, dtype=torch.int64)
    bits = (z_id.unsqueeze(-1) >> shifts) & 1
    return bits.flatten(start_dim=-2).to(torch.uint8)


def decode_bits(bits: torch.Tensor, q_b: int) -> torch.Tensor:
    """Inverse of :func:`encode_bits`."""
    bits = torch.as_tensor(bits)
    if bits.shape[-1] % q_b:
        raise ShapeError(f"bit length {bits.shape[-1]} is not a multiple of q_b={q_b}")
    groups = bits.to(torch.int64).unflatten(-1, (bits.shape[-1] // q_b, q_b))
    weights = 2 ** torch.arange(q_b - 1, -1, -1, dtype=torch.int64)
    return (groups * weights).sum(-1)


def modulate_qpsk(bits: torch.Tensor) -> torch.Tensor:
    """Gray QPSK, two bits per unit-energy symbol.

    00 -> (+1+j)/sqrt2, 01 -> (+1-j)/sqrt2, 11 -> (-1-j)/sqrt2, 10 -> (-1+j)/sqrt2.
    """
    bits = torch.as_tensor(bits)
    if bits.shape[-1] % 2:
        raise ShapeError(f"QPSK needs an even number of bits, got {bits.shape[-1]}")
    pairs = bits.to(torch.float64).unflatten(-1, (bits.shape[-1] // 2, 2))
    re = (1.0 - 2.0 * pairs[..., 0]) / _SQRT2
    im = (1.0 - 2.0 * pairs[..., 1]) / _SQRT2
    return torch.complex(re, im)


def demodulate_qpsk(symbols: torch.Tensor) -> torch.Tensor:
    """Hard per-component sign decision (nearest constellation point)."""
    b0 = (symbols.real < 0).to(torch.uint8)
    b1 = (symbols.imag < 0).to(torch.uint8)
    return torch.stack([b0, b1], dim=-1).flatten(start_dim=-2)


def complex_awgn(
    symbols: torch.Tensor, sigma: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Circularly symmetric complex noise of total power ``sigma^2`` per symbol."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return symbols
    std = sigma / _SQRT2
    re = torch.randn(symbols.shape, generator=generator, dtype=torch.float64)
    im = torch.randn(symbols.shape, generator=generator, dtype=torch.float64)
    return symbols + std * torch.complex(re, im)


def soft_round(x: torch.Tensor, r: int = 3) -> torch.Tensor:
    """Smooth rounding surrogate, ``x - sin(2 pi x) / (2 pi)`` iterated ``r`` times.

    Integers are exact fixed points; each iteration flattens the staircase
    further around them.
    """
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    for _ in range(r):
        x = x - torch.sin(2 * math.pi * x) / (2 * math.pi)
    return x


def digital_train_forward(
    z: torch.Tensor,
    spec: QuantizerSpec,
    sigma: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Differentiable stand-in for the digital link used during training."""
    soft_idx = soft_round(g_map(z, spec), spec.r)
    if sigma > 0:
        noise = torch.randn(soft_idx.shape, generator=generator, dtype=z.dtype, device=z.device)
        soft_idx = soft_idx + sigma * noise
    return dac(soft_idx, spec)


def _pad_even(bits: torch.Tensor) -> tuple[torch.Tensor, int]:
    if bits.shape[-1] % 2 == 0:
        return bits, 0
    pad = torch.zeros(bits.shape[:-1] + (1,), dtype=bits.dtype)
    return torch.cat([bits, pad], dim=-1), 1


def digital_infer_forward(
    z: torch.Tensor,
    spec: QuantizerSpec,
    sigma: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Hard digital chain: ADC, bits, QPSK, complex AWGN, demod, DAC.

    Odd bit counts are padded with one zero bit before modulation and the pad
    is dropped after demodulation.
    """
    frame = transmit_frame(z.detach(), spec, sigma, generator)
    return frame["reconstruction"].to(z.dtype)


def transmit_frame(
    z: torch.Tensor,
    spec: QuantizerSpec,
    sigma: float,
    generator: torch.Generator | None = None,
) -> dict[str, torch.Tensor]:
    """Run the inference chain and keep every intermediate stage."""
    idx = quantize_index(z, spec)
    bits = encode_bits(idx, spec.q_b)
    padded, n_pad = _pad_even(bits)
    symbols = modulate_qpsk(padded)
    received = complex_awgn(symbols, sigma, generator)
    rx_bits = demodulate_qpsk(received)
    if n_pad:
        rx_bits = rx_bits[..., :-n_pad]
    rx_idx = decode_bits(rx_bits, spec.q_b)
    return {
        "value": z,
        "index": idx,
        "bits": bits,
        "symbols": symbols,
        "received": received,
        "rx_bits": rx_bits,
        "rx_index": rx_idx,
        "reconstruction": dac(rx_idx, spec),
    }


def debug_table(
    values: torch.Tensor, spec: QuantizerSpec, sigma: float = 0.0, seed: int = 0
) -> list[dict[str, str]]:
    """Per-entry view of the digital chain, for printing.

    Symbols are listed per entry; with odd ``q_b`` a symbol straddles two
    entries and is shown with both.
    """
    values = torch.as_tensor(values, dtype=torch.float64).reshape(-1)
    gen = torch.Generator().manual_seed(seed)
    frame = transmit_frame(values, spec, sigma, gen)
    q = spec.q_b
    rows = []
    for i, v in enumerate(values.tolist()):
        lo, hi = i * q, (i + 1) * q
        sym_ids = range(lo // 2, (hi - 1) // 2 + 1)
        fmt = lambda c: f"{c.real:+.3f}{c.imag:+.3f}j"  # noqa: E731
        rows.append(
            {
                "value": f"{v:.6g}",
                "index": str(int(frame["index"][i])),
                "bits": "".join(str(int(b)) for b in frame["bits"][lo:hi]),
                "symbols": " ".join(fmt(complex(frame["symbols"][s])) for s in sym_ids),
                "received": " ".join(fmt(complex(frame["received"][s])) for s in sym_ids),
                "rx_bits": "".join(str(int(b)) for b in frame["rx_bits"][lo:hi]),
                "reconstruction": f"{float(frame['reconstruction'][i]):.6g}",
            }
        )
    return rows
