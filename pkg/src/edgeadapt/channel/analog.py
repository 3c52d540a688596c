"""Real-valued AWGN links between the sensing devices and the edge server."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from ..errors import ShapeError


def snr_to_sigma(snr_db: float, signal_power: float = 1.0) -> float:
    """Noise standard deviation giving ``snr_db`` against ``signal_power``.

    SNR is measured per real dimension, so ``sigma**2 = P / 10**(snr_db/10)``.
    """
    if signal_power <= 0:
        raise ValueError(f"signal_power must be positive, got {signal_power}")
    return math.sqrt(signal_power / 10.0 ** (snr_db / 10.0))


def device_generators(seed: int, k_devices: int) -> list[torch.Generator]:
    """One independent noise stream per device, derived from ``seed``.

    Streams are spawned from a numpy SeedSequence so device ``k`` always gets
    the same stream regardless of the order devices are simulated in.
    """
    children = np.random.SeedSequence(seed).spawn(k_devices)
    gens = []
    for child in children:
        g = torch.Generator()
        g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))
        gens.append(g)
    return gens


def awgn(z: torch.Tensor, sigma: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Return ``z + n`` with ``n ~ N(0, sigma^2)`` i.i.d. per entry.

    ``sigma == 0`` is the noiseless bypass and returns ``z`` untouched.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return z
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    return z + sigma * noise


def concat_views(received: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate per-device feature vectors in device-index order.

    Works on single vectors or batches; concatenation is along the last axis.
    """
    if len(received) == 0:
        raise ShapeError("need at least one device vector")
    width = received[0].shape[-1]
    for k, r in enumerate(received):
        if r.shape[-1] != width:
            raise ShapeError(f"device {k} has length {r.shape[-1]}, expected {width}")
    return torch.cat(list(received), dim=-1)
