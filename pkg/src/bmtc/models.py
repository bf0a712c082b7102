"""Toy video classifiers, their training loop and the role-aware model handle.

All networks take clip-layout input ``(N, T, H, W, C)`` in [0, 1] and return
``(N, classes)`` logits.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BlackBoxViolation, CapabilityError, ContractError, TrainingError

ROLES = ("surrogate", "target", "auxiliary")

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "softplus": nn.Softplus, "elu": nn.ELU}


def clips_to_tensor(clips, dtype=None) -> torch.Tensor:
    """Stack VideoClips (or raw T x H x W x C arrays) into an (N, T, H, W, C) tensor."""
    arrays = [getattr(c, "frames", c) for c in clips]
    return torch.as_tensor(np.stack(arrays), dtype=dtype or torch.get_default_dtype())


class C3DNet(nn.Module):
    """Three 3x3x3 conv blocks and global max pooling."""

    arch = "c3d"

    def __init__(self, n_classes, width=16, act="relu", pool="max"):
        super().__init__()
        Act = _ACTIVATIONS[act]
        Pool = nn.MaxPool3d if pool == "max" else nn.AvgPool3d
        self.features = nn.Sequential(
            nn.Conv3d(3, width, 3, padding=1), Act(), Pool((1, 2, 2)),
            nn.Conv3d(width, 2 * width, 3, padding=1), Act(), Pool((2, 2, 2)),
            nn.Conv3d(2 * width, 2 * width, 3, padding=1), Act(),
        )
        self.head = nn.Linear(2 * width, n_classes)

    def forward(self, x):
        x = x.permute(0, 4, 1, 2, 3)
        x = self.features(x)
        return self.head(x.amax(dim=(2, 3, 4)))


class TemporalPoolNet(nn.Module):
    """Per-frame 2D convs, max over time, then a spatial conv on the pooled map."""

    arch = "tp2d"

    def __init__(self, n_classes, width=16, act="relu", pool="max"):
        super().__init__()
        Act = _ACTIVATIONS[act]
        Pool = nn.MaxPool2d if pool == "max" else nn.AvgPool2d
        self.frame = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), Act(), Pool(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), Act(),
        )
        self.post = nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, padding=1), Act(), Pool(2))
        self.head = nn.Linear(2 * width, n_classes)

    def forward(self, x):
        n, t, h, w, c = x.shape
        f = self.frame(x.permute(0, 1, 4, 2, 3).reshape(n * t, c, h, w))
        f = f.reshape(n, t, *f.shape[1:]).amax(dim=1)
        f = self.post(f)
        return self.head(f.amax(dim=(2, 3)))


class R21DNet(nn.Module):
    """Factorized spatial (1x3x3) then temporal (3x1x1) convolutions."""

    arch = "r21d"

    def __init__(self, n_classes, width=12, act="relu", pool="max"):
        super().__init__()
        Act = _ACTIVATIONS[act]
        Pool = nn.MaxPool3d if pool == "max" else nn.AvgPool3d
        self.features = nn.Sequential(
            nn.Conv3d(3, width, (1, 5, 5), padding=(0, 2, 2), stride=(1, 2, 2)), Act(),
            nn.Conv3d(width, width, (3, 1, 1), padding=(1, 0, 0)), Act(), Pool((1, 2, 2)),
            nn.Conv3d(width, 2 * width, (1, 3, 3), padding=(0, 1, 1)), Act(),
            nn.Conv3d(2 * width, 2 * width, (3, 1, 1), padding=(1, 0, 0)), Act(),
        )
        self.head = nn.Linear(2 * width, n_classes)

    def forward(self, x):
        x = self.features(x.permute(0, 4, 1, 2, 3))
        return self.head(x.amax(dim=(2, 3, 4)))


ARCHITECTURES = {cls.arch: cls for cls in (C3DNet, TemporalPoolNet, R21DNet)}


def build_model(arch, n_classes, width=16, act="relu", pool="max", seed=0):
    if arch not in ARCHITECTURES:
        raise ContractError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    torch.manual_seed(seed)
    model = ARCHITECTURES[arch](n_classes, width=width, act=act, pool=pool)
    model.build_args = dict(arch=arch, n_classes=n_classes, width=width, act=act, pool=pool)
    return model


def n_outputs(model) -> int:
    return model.head.out_features


def widen_head(model, k: int, seed: int = 0, std: float = 0.01):
    """Return a copy of a K-way classifier with a 2K-way head.

    The first K rows keep the trained weights; the K new rows start from a
    seeded N(0, std) draw with zero bias.
    """
    old = model.head
    if old.out_features != k:
        raise ContractError(f"expected a {k}-way head, got {old.out_features}")
    wide = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(old.in_features, 2 * k, dtype=old.weight.dtype)
    with torch.no_grad():
        head.weight.copy_(torch.randn(2 * k, old.in_features, generator=gen, dtype=old.weight.dtype) * std)
        head.bias.zero_()
        head.weight[:k] = old.weight
        head.bias[:k] = old.bias
    wide.head = head
    if hasattr(model, "build_args"):
        wide.build_args = dict(model.build_args, n_classes=2 * k)
    return wide


def train_classifier(model, clips, epochs=12, lr=3e-3, batch_size=25, seed=0, labels=None, weight_decay=0.0):
    """Plain Adam + cross-entropy training.  Returns the per-epoch mean losses."""
    x = clips_to_tensor(clips)
    y = torch.as_tensor(labels if labels is not None else [c.label for c in clips], dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    history = []
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(y), generator=gen)
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError("classifier loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(y))
    model.eval()
    return history


@torch.no_grad()
def predict(model, clips, k=None, batch_size=64) -> np.ndarray:
    """Argmax predictions, restricted to the first ``k`` logits when given."""
    out = []
    for start in range(0, len(clips), batch_size):
        logits = model(clips_to_tensor(clips[start:start + batch_size]))
        if k is not None:
            logits = logits[:, :k]
        out.append(logits.argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(model, clips, k=None) -> float:
    if not clips:
        raise ContractError("accuracy of an empty clip list")
    labels = np.array([c.label for c in clips])
    return float(np.mean(predict(model, clips, k) == labels))


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not hasattr(model, "build_args"):
        raise ContractError("model was not built through build_model; cannot serialize")
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(model.build_args, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_model(path):
    path = Path(path)
    meta = path.with_suffix(".json")
    if not path.is_file() or not meta.is_file():
        raise ContractError(f"missing model checkpoint {path}")
    args = json.loads(meta.read_text(encoding="utf-8"))
    model = build_model(**args)
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model


@dataclass
class ModelHandle:
    """A model plus the role it plays in an experiment.

    Target handles are inference-only: any forward pass that could feed a
    gradient (grad mode on and an input requiring grad) is counted in
    ``grad_requests`` and refused with :class:`BlackBoxViolation`.  The
    check is a hook on the wrapped module, so it also fires when someone
    calls ``handle.model`` directly.
    """

    model_id: str
    model: nn.Module
    role: str = "target"
    arch: str = ""
    grad_requests: int = field(default=0)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown role {self.role!r}")
        if not self.arch:
            self.arch = getattr(self.model, "arch", type(self.model).__name__)
        self.model.eval()
        if self.role == "target":
            self._hook = self.model.register_forward_pre_hook(self._guard)

    @property
    def class_count(self) -> int:
        return n_outputs(self.model)

    @property
    def gradient_capable(self) -> bool:
        return self.role != "target"

    def _guard(self, module, inputs):
        if torch.is_grad_enabled() and any(isinstance(t, torch.Tensor) and t.requires_grad for t in inputs):
            self.grad_requests += 1
            raise BlackBoxViolation(f"gradient requested through target model {self.model_id!r}")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model(x)

    def probs(self, x: torch.Tensor, k=None) -> torch.Tensor:
        logits = self.logits(x)
        if k is not None:
            logits = logits[:, :k]
        return torch.softmax(logits, dim=1)

    def predict(self, clips, k=None) -> np.ndarray:
        return predict(self.model, clips, k)

    def grad_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable forward pass; refused for targets."""
        if not self.gradient_capable:
            self.grad_requests += 1
            raise BlackBoxViolation(f"gradient requested through target model {self.model_id!r}")
        if not any(p.requires_grad for p in self.model.parameters()) and not x.requires_grad:
            raise CapabilityError(f"model {self.model_id!r} cannot produce gradients for this input")
        return self.model(x)
