"""Shared test utilities: tiny model configs and a finite-difference
gradient checker used by both the network tests and the acceptance suite."""

import numpy as np
import torch

from relight_lab import dataset as ds
from relight_lab import diffusion as df
from relight_lab import envmap as em
from relight_lab import network as net


def tiny_config(resolution=16, base=8):
    return net.UNetConfig(base_channels=base, channel_mults=(1, 2),
                          label_vocab_sizes=(10, 4), embed_dim=16,
                          resolution=resolution)


def random_tuple(res=16, seed=0):
    rng = np.random.default_rng(seed)
    ldr = em.LdrEnvImage(width=res, height=res,
                         pixels=rng.uniform(0, 1, (res, res, 3)).astype(np.float32))
    return ds.RelightTuple(
        input_image=rng.uniform(0, 1, (res, res, 3)).astype(np.float32),
        target_image=rng.uniform(0, 1, (res, res, 3)).astype(np.float32),
        ldr_env=ldr,
        label=(int(rng.integers(0, 10)), int(rng.integers(0, 4))),
        task_flag="relight",
        input_mask=rng.uniform(0, 1, (res, res)) > 0.3,
    )


def gradient_check(n_params=20, seed=0, h=1e-5):
    """Central-difference check of training_loss gradients on a tiny double-
    precision model; returns the worst relative error over sampled scalars."""
    torch.manual_seed(seed)
    model = net.init_model(tiny_config(), seed).double()
    schedule = df.make_schedule(20, 1e-3, 0.02)
    tup = random_tuple(seed=seed)
    eps = torch.randn(1, 3, 16, 16, dtype=torch.float64,
                      generator=torch.Generator().manual_seed(seed + 1))

    def loss_value():
        rng = torch.Generator().manual_seed(seed + 2)
        return df.training_loss(_DoubleWrap(model), tup, 7, eps, rng, schedule,
                                dropout_p=0.0)

    loss = loss_value()
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)

    rng = np.random.default_rng(seed + 3)
    flat_index = []
    for pi, p in enumerate(params):
        for k in range(p.numel()):
            flat_index.append((pi, k))
    picks = rng.choice(len(flat_index), size=n_params, replace=False)

    worst = 0.0
    for pick in picks:
        pi, k = flat_index[pick]
        p = params[pi]
        orig = p.data.view(-1)[k].item()
        p.data.view(-1)[k] = orig + h
        up = float(loss_value())
        p.data.view(-1)[k] = orig - h
        down = float(loss_value())
        p.data.view(-1)[k] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[pi].view(-1)[k])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst


class _DoubleWrap:
    """Feeds float64 packed inputs into a float64 model."""

    def __init__(self, model):
        self.model = model

    def __call__(self, packed, t, label):
        packed = df.PackedInput(channels=packed.channels.double(),
                                drop_flags=packed.drop_flags)
        return self.model(packed, t, label)
