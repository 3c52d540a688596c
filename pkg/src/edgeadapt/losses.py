"""Training objectives: Gaussian-kernel MMD, class-weighted LMMD, CE and KD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Literal

import torch

from .errors import ShapeError

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float = 1.0
    mode: Literal["fixed", "median"] = "median"

    def __post_init__(self):
        if self.mode not in ("fixed", "median"):
            raise ValueError(f"unknown bandwidth mode {self.mode!r}")
        if self.mode == "fixed" and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass(frozen=True)
class LossWeights:
    """Loss coefficients for both training steps.

    ``alpha``/``beta`` are the generic distillation mixing weights; step 2
    uses ``lambda2`` for the distillation term and 1 for supervised CE.
    """

    lam: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.5
    epsilon: float = 0.9
    alpha: float = 0.5
    beta: float = 1.0
    kd_orientation: Literal["teacher_target", "as_printed"] = "teacher_target"
    target_weights: Literal["hard", "soft"] = "hard"

    def __post_init__(self):
        if min(self.lam, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


# -- kernels -----------------------------------------------------------------


def _sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # explicit differences rather than the |x|^2+|y|^2-2xy expansion: exact zeros on the diagonal
    return ((x.unsqueeze(-2) - y.unsqueeze(-3)) ** 2).sum(-1)


def gaussian_kernel(x1: torch.Tensor, x2: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """``exp(-|x1 - x2|^2 / (2 bw^2))`` for a pair of vectors."""
    if x1.shape != x2.shape:
        raise ShapeError(f"length mismatch: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    return torch.exp(-((x1 - x2) ** 2).sum(-1) / (2 * bandwidth**2))


def gram(x: torch.Tensor, y: torch.Tensor, bandwidth) -> torch.Tensor:
    """Kernel matrix between the rows of ``x`` and ``y``."""
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"feature dims differ: {x.shape[-1]} vs {y.shape[-1]}")
    return torch.exp(-_sq_dists(x, y) / (2 * bandwidth**2))


def median_bandwidth(samples: torch.Tensor) -> torch.Tensor:
    """Median heuristic: ``bw^2`` is half the median pairwise squared distance.

    Falls back to 1 when the median is zero. The result is detached.
    """
    samples = samples.detach()
    n = samples.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two samples")
    iu = torch.triu_indices(n, n, offset=1)
    d2 = _sq_dists(samples, samples)[iu[0], iu[1]]
    med = torch.quantile(d2, 0.5)
    if med <= 0:
        return torch.ones((), dtype=samples.dtype)
    return torch.sqrt(med / 2)


def resolve_bandwidth(spec: KernelSpec, *feature_sets: torch.Tensor):
    if spec.mode == "fixed":
        return spec.bandwidth
    return median_bandwidth(torch.cat(feature_sets, dim=0))


def taylor_feature_map(x: torch.Tensor, bandwidth: float, order: int = 12) -> torch.Tensor:
    """Explicit truncated feature map of the Gaussian kernel.

    ``phi(x) = exp(-|x|^2/2bw^2) * [x^a / (bw^|a| sqrt(a!))]`` over all
    multi-indices ``a`` with ``|a| <= order``, so ``phi(a).phi(b)`` equals the
    kernel up to the truncated tail of the exponential series.
    """
    n, d = x.shape
    u = x / bandwidth
    cols = [torch.ones(n, dtype=x.dtype)]
    for deg in range(1, order + 1):
        for combo in combinations_with_replacement(range(d), deg):
            counts = torch.bincount(torch.tensor(combo), minlength=d)
            norm = math.sqrt(math.prod(math.factorial(int(c)) for c in counts))
            cols.append(torch.prod(u[:, list(combo)], dim=1) / norm)
    feats = torch.stack(cols, dim=1)
    return torch.exp(-(u**2).sum(1, keepdim=True) / 2) * feats


# -- discrepancies -----------------------------------------------------------


def mmd_v(xs: torch.Tensor, xt: torch.Tensor, bandwidth) -> torch.Tensor:
    """Squared distance of empirical kernel mean embeddings.

    Diagonal terms are kept (V-statistic), so the value is never negative.
    """
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise ValueError("mmd of an empty set")
    return (
        gram(xs, xs, bandwidth).mean()
        + gram(xt, xt, bandwidth).mean()
        - 2 * gram(xs, xt, bandwidth).mean()
    )


def class_weights(rows: torch.Tensor) -> torch.Tensor:
    """Column-normalise one-hot or probability rows; empty classes get zeros."""
    totals = rows.sum(0, keepdim=True)
    safe = torch.where(totals > 0, totals, torch.ones_like(totals))
    return torch.where(totals > 0, rows / safe, torch.zeros_like(rows))


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels.long(), num_classes).to(dtype)


def lmmd(
    zs: torch.Tensor,
    ys: torch.Tensor,
    zt: torch.Tensor,
    pt: torch.Tensor,
    num_classes: int,
    bandwidth,
    target_weights: Literal["hard", "soft"] = "hard",
) -> torch.Tensor:
    """Class-weighted MMD between source and target features.

    ``ys`` are source class indices, ``pt`` the target predicted probabilities.
    Target weights come from the argmax one-hot (``hard``) or from ``pt``
    directly (``soft``); they carry no gradient either way.
    """
    if zs.shape[0] != ys.shape[0] or zt.shape[0] != pt.shape[0]:
        raise ShapeError("features and labels disagree in batch size")
    if pt.shape[-1] != num_classes:
        raise ShapeError(f"expected {num_classes} target probabilities, got {pt.shape[-1]}")
    ws = class_weights(one_hot(ys, num_classes, zs.dtype))
    pt = pt.detach()
    if target_weights == "hard":
        wt = class_weights(one_hot(pt.argmax(-1), num_classes, zt.dtype))
    elif target_weights == "soft":
        wt = class_weights(pt.to(zt.dtype))
    else:
        raise ValueError(f"unknown target weighting {target_weights!r}")
    k_ss = gram(zs, zs, bandwidth)
    k_tt = gram(zt, zt, bandwidth)
    k_st = gram(zs, zt, bandwidth)
    total = (
        torch.einsum("ic,ij,jc->", ws, k_ss, ws)
        + torch.einsum("ic,ij,jc->", wt, k_tt, wt)
        - 2 * torch.einsum("ic,ij,jc->", ws, k_st, wt)
    )
    return total / num_classes


# -- classification and distillation -----------------------------------------


def cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean ``-sum_c t_c log p_c`` with probabilities clamped at 1e-12."""
    logp = torch.log(probs.clamp_min(PROB_CLAMP))
    return -(target * logp).sum(-1).mean()


def warmup_delta(epoch: float, total: int) -> float:
    """Sigmoid ramp ``2 / (1 + exp(-10 e/E)) - 1`` for the adaptation weight."""
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"need 0 <= e <= E and E >= 1, got e={epoch}, E={total}")
    return 2.0 / (1.0 + math.exp(-10.0 * epoch / total)) - 1.0


def kd_mask(teacher_probs: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Boolean mask of samples whose teacher confidence exceeds ``epsilon``."""
    return teacher_probs.max(-1).values > epsilon


def kd_ce_masked(
    student_probs: torch.Tensor,
    teacher_probs: torch.Tensor,
    mask: torch.Tensor,
    orientation: Literal["teacher_target", "as_printed"] = "teacher_target",
) -> torch.Tensor:
    """Mean cross-entropy between student and teacher over masked samples.

    ``teacher_target`` scores ``-sum p_tc log p_st``; ``as_printed`` swaps the
    roles to ``-sum p_st log p_tc``. An empty mask contributes 0.
    """
    if student_probs.shape != teacher_probs.shape:
        raise ShapeError("student and teacher outputs differ in shape")
    if not torch.any(mask):
        return student_probs.sum() * 0.0
    p_st = student_probs[mask]
    p_tc = teacher_probs[mask].detach()
    if orientation == "teacher_target":
        terms = -(p_tc * torch.log(p_st.clamp_min(PROB_CLAMP))).sum(-1)
    elif orientation == "as_printed":
        terms = -(p_st * torch.log(p_tc.clamp_min(PROB_CLAMP))).sum(-1)
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return terms.mean()


@dataclass
class LossTerms:
    total: torch.Tensor
    ce: torch.Tensor
    uda: torch.Tensor
    kd: torch.Tensor | None = None
    delta: float = 1.0
    mask_fraction: float | None = None


def loss_step1(
    probs_s: torch.Tensor,
    labels_s: torch.Tensor,
    feats_s: torch.Tensor,
    probs_t: torch.Tensor,
    feats_t: torch.Tensor,
    weights: LossWeights,
    kernel: KernelSpec,
    epoch: int,
    total_epochs: int,
) -> LossTerms:
    """Supervised CE plus the warm-up scaled LMMD term."""
    num_classes = probs_s.shape[-1]
    ce = cross_entropy(probs_s, one_hot(labels_s, num_classes, probs_s.dtype))
    bw = resolve_bandwidth(kernel, feats_s, feats_t)
    uda = lmmd(feats_s, labels_s, feats_t, probs_t, num_classes, bw, weights.target_weights)
    delta = warmup_delta(epoch, total_epochs)
    return LossTerms(total=ce + delta * weights.lam * uda, ce=ce, uda=uda, delta=delta)


def loss_step2(
    probs_s: torch.Tensor,
    labels_s: torch.Tensor,
    feats_s: torch.Tensor,
    probs_t: torch.Tensor,
    feats_t: torch.Tensor,
    teacher_probs_t: torch.Tensor,
    weights: LossWeights,
    kernel: KernelSpec,
) -> LossTerms:
    """Student objective: source CE, LMMD and the masked distillation term."""
    num_classes = probs_s.shape[-1]
    ce = cross_entropy(probs_s, one_hot(labels_s, num_classes, probs_s.dtype))
    bw = resolve_bandwidth(kernel, feats_s, feats_t)
    uda = lmmd(feats_s, labels_s, feats_t, probs_t, num_classes, bw, weights.target_weights)
    mask = kd_mask(teacher_probs_t, weights.epsilon)
    kd = kd_ce_masked(probs_t, teacher_probs_t, mask, weights.kd_orientation)
    total = ce + weights.lambda1 * uda + weights.lambda2 * kd
    return LossTerms(
        total=total, ce=ce, uda=uda, kd=kd, mask_fraction=float(mask.float().mean())
    )
