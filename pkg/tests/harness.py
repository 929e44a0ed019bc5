"""Scripted objectives and tiny fixtures for driving the optimiser without a detector."""

import numpy as np
import torch

from oobtrigger.dataset import Dataset, Sample
from oobtrigger.losses import LossBreakdown, LossWeights
from oobtrigger.uapgd import UAPGDConfig, run_uapgd

from oracles import simulate_algorithm1

EPOCH_STRIDE = 1_000_003


class Scripted:
    """Loss objective replaying a fixed per-epoch sequence with fixed gradients."""

    def __init__(self, losses, grads):
        self.losses = losses
        self.grads = [torch.as_tensor(g) for g in grads]
        self.seen = []

    def __call__(self, trigger, batch, stream_base):
        epoch = stream_base // EPOCH_STRIDE
        self.seen.append(trigger.detach().clone())
        loss = self.losses[epoch]
        linear = (trigger * self.grads[epoch]).sum()
        # value is the scripted loss, gradient is the scripted direction
        total = linear - linear.detach() + loss
        return LossBreakdown(loss, 0.0, 0.0, loss, n_images=len(batch), total=total)


class Differentiable:
    differentiable = True


def tiny_dataset(n=3):
    img = np.zeros((8, 8, 3), np.float32)
    return Dataset(tuple(Sample(f"s{i}", img) for i in range(n)), ("a",), 0)


def scripted_run(losses, seed=0, adaptive=True, eta0=0.1, l_o=2, l_c=3):
    """Run ``run_uapgd`` on a scripted sequence and the hand simulation side by side."""
    rng = np.random.default_rng(seed)
    grads = [rng.integers(-1, 2, size=(3, 2, 3)).astype(np.float64) for _ in losses]
    a0 = rng.uniform(0, 1, size=(3, 2, 3))
    cfg = UAPGDConfig(eta0=eta0, n_epoch=len(losses), l_o=l_o, l_c=l_c, eps1=0.0, eps2=0.0, slack="absolute",
                      eta_min=0.0, batch_size=32, adaptive=adaptive)
    obj = Scripted(losses, grads)
    best, report = run_uapgd(cfg, tiny_dataset(), Differentiable(), LossWeights(), None, None, 0,
                             torch.from_numpy(a0), objective=obj)
    oracle = simulate_algorithm1(losses, grads, a0, eta0, l_o, l_c, 0.0, 0.0, adaptive=adaptive)
    return best, report, obj, oracle
