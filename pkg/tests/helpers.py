"""Small hand-built models and pools shared by the tests."""

import numpy as np
import torch
import torch.nn as nn

from bmtc.pool import BackgroundPool, PoolEntry
from bmtc.tensors import VideoClip


class BrightnessNet(nn.Module):
    """Logits are a fixed linear map of the clip's mean color per channel."""

    arch = "brightness"

    def __init__(self, weight, bias=None):
        super().__init__()
        w = torch.as_tensor(weight, dtype=torch.get_default_dtype())
        self.head = nn.Linear(w.shape[1], w.shape[0])
        with torch.no_grad():
            self.head.weight.copy_(w)
            self.head.bias.copy_(torch.zeros(w.shape[0]) if bias is None else torch.as_tensor(bias))

    def forward(self, x):
        return self.head(x.mean(dim=(1, 2, 3)))


class TinyVideoNet(nn.Module):
    """Smooth conv net small enough for finite-difference checks."""

    arch = "tiny"

    def __init__(self, k, seed=0, width=3):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Conv3d(3, width, (2, 3, 3), padding=(0, 1, 1))
        self.head = nn.Linear(width * 2, k)

    def forward(self, x):
        h = torch.tanh(self.conv(x.permute(0, 4, 1, 2, 3)))
        pooled = torch.cat([h.mean(dim=(2, 3, 4)), (h * h).mean(dim=(2, 3, 4))], dim=1)
        return self.head(pooled)


def random_pool(k, h=6, w=6, seed=0):
    rng = np.random.default_rng(seed)
    entries = tuple(PoolEntry(rng.random((h, w, 3)).astype(np.float32), c, c + k) for c in range(k))
    return BackgroundPool(entries, k, seed)


def random_clip(label, t=4, h=6, w=6, seed=0, clip_id=None):
    rng = np.random.default_rng(seed)
    return VideoClip(rng.random((t, h, w, 3)).astype(np.float32), label, clip_id or f"r{seed}")


# criterion lines collected by the acceptance tests, printed in the terminal summary
ACCEPTANCE = []
