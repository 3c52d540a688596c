"""Central finite-difference checks of the training objectives through the network."""

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from edgeadapt.channel import ChannelSpec, NoiseSource
from edgeadapt.losses import (
    KernelSpec, LossWeights, cross_entropy, kd_ce_masked, kd_mask, lmmd, loss_step1, loss_step2, median_bandwidth, one_hot,
)
from edgeadapt.model import EdgeModel, ModelConfig

TERMS = ("ce", "lmmd", "kd", "step1", "step2")
STEP = 1e-5


def toy_config(mode="analog", **kw):
    base = dict(a_in=8, cr=0.25, num_classes=3, k_devices=2, view_shape=(3, 8, 8), mode=mode, hidden=16)
    base.update(kw)
    return ModelConfig(**base)


class Instance:
    """One random network, batch, channel realisation and loss term."""

    def __init__(self, term, seed, mode="analog", n=4, config=None):
        self.term = term
        rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        cfg = config or toy_config(mode)
        self.model = EdgeModel(cfg).double().train()
        self.channel = ChannelSpec.uniform(5.0, cfg.k_devices, cfg.mode)
        self.noise_seed = seed + 10_000
        shape = (n, cfg.k_devices, *cfg.view_shape)
        self.xs = torch.tensor(rng.uniform(0, 1, shape))
        self.xt = torch.tensor(rng.uniform(0, 1, shape))
        self.ys = torch.tensor(rng.integers(0, cfg.num_classes, n))
        self.C = cfg.num_classes
        # teacher outputs are constants here; the threshold splits the batch in half
        p = torch.tensor(rng.dirichlet(np.full(self.C, 0.3), size=n))
        self.teacher = p
        conf = p.max(-1).values.sort().values
        self.epsilon = float((conf[n // 2 - 1] + conf[n // 2]) / 2)
        self.weights = LossWeights(lam=0.7, lambda1=0.3, lambda2=0.5, epsilon=self.epsilon)
        # the median heuristic is detached in training, so it is frozen here too
        with torch.no_grad():
            noise = NoiseSource(self.noise_seed, cfg.k_devices)
            feats = torch.cat([self.model(x, self.channel, noise).z_hat for x in (self.xs, self.xt)])
        self.kernel = KernelSpec(bandwidth=float(median_bandwidth(feats)), mode="fixed")
        self.theta0 = parameters_to_vector(self.model.parameters()).detach().clone()

    def loss(self):
        noise = NoiseSource(self.noise_seed, self.model.config.k_devices)
        out_s = self.model(self.xs, self.channel, noise)
        out_t = self.model(self.xt, self.channel, noise)
        if self.term == "ce":
            return cross_entropy(out_s.probs, one_hot(self.ys, self.C))
        if self.term == "lmmd":
            return lmmd(out_s.z_hat, self.ys, out_t.z_hat, out_t.probs, self.C, self.kernel.bandwidth)
        if self.term == "kd":
            return kd_ce_masked(out_t.probs, self.teacher, kd_mask(self.teacher, self.epsilon))
        if self.term == "step1":
            return loss_step1(out_s.probs, self.ys, out_s.z_hat, out_t.probs, out_t.z_hat,
                              self.weights, self.kernel, 3, 10).total
        if self.term == "step2":
            return loss_step2(out_s.probs, self.ys, out_s.z_hat, out_t.probs, out_t.z_hat, self.teacher,
                              self.weights, self.kernel).total
        raise ValueError(self.term)

    def at(self, theta):
        with torch.no_grad():
            vector_to_parameters(theta, self.model.parameters())
            return self.loss().item()

    def grad(self):
        vector_to_parameters(self.theta0.clone(), self.model.parameters())
        self.model.zero_grad()
        self.loss().backward()
        return torch.cat([
            torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.reshape(-1)
            for p in self.model.parameters()
        ])

    def directional_error(self, direction):
        g = self.grad()
        analytic = float(g @ direction)
        fd = (self.at(self.theta0 + STEP * direction) - self.at(self.theta0 - STEP * direction)) / (2 * STEP)
        return abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-8), analytic

    def coordinate_errors(self, indices):
        g = self.grad()
        errs = []
        for i in indices:
            e = torch.zeros_like(self.theta0)
            e[i] = STEP
            fd = (self.at(self.theta0 + e) - self.at(self.theta0 - e)) / (2 * STEP)
            scale = max(abs(fd), abs(g[i].item()), 1e-6)
            errs.append(abs(g[i].item() - fd) / scale)
        return errs


def desk_config(mode="analog"):
    return ModelConfig(a_in=64, cr=0.1, num_classes=5, k_devices=4, view_shape=(3, 16, 16), mode=mode)


def random_direction(n, seed):
    v = torch.tensor(np.random.default_rng(seed).normal(size=n))
    return v / v.norm()
