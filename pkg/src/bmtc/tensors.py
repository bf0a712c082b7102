"""Numeric domain types plus the two primitives every attack step uses.

Pixels live in [0, 1].  Budgets quoted on the 0-255 scale (16 for video,
8 for images) are stored divided by 255.
"""

from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, NumericError

VIDEO_EPSILON = 16 / 255
VIDEO_ETA = 1.6 / 255
IMAGE_EPSILON = 8 / 255
IMAGE_ETA = 0.8 / 255


@contextlib.contextmanager
def float64_mode():
    """Temporarily make float64 the torch default dtype (for gradient checks)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@dataclass
class VideoClip:
    """A T x H x W x C clip in [0, 1] with its action label."""

    frames: np.ndarray
    label: int
    clip_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ContractError(f"frames must be T x H x W x 3, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ContractError("a clip needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise NumericError(f"clip {self.clip_id!r} has non-finite pixels")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ContractError(f"clip {self.clip_id!r} has pixels outside [0, 1]")
        if int(self.label) < 0:
            raise ContractError(f"negative label {self.label}")
        self.frames = frames
        self.label = int(self.label)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def check_label(self, k: int) -> None:
        if not 0 <= self.label < k:
            raise ContractError(f"label {self.label} outside [0, {k})")

    def with_frames(self, frames, clip_id=None) -> "VideoClip":
        return VideoClip(np.asarray(frames), self.label, self.clip_id if clip_id is None else clip_id)


@dataclass
class Perturbation:
    delta: np.ndarray

    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    def within(self, epsilon: float, tol: float = 1e-12) -> bool:
        return self.linf() <= epsilon + tol


@dataclass
class AttackConfig:
    """Every scalar of the attack in one place.

    ``tgc_grad`` picks how the temporal term is differentiated
    (``double_backprop`` or ``detached``), ``selection_mode`` is ``per_frame``
    or ``per_video`` and ``transfer_reward_models`` is ``heldout`` or
    ``targets``.
    """

    epsilon: float = VIDEO_EPSILON
    eta: float = VIDEO_ETA
    n_iter: int = 10
    gamma: float = 0.2
    beta: float = 0.1
    alpha1: float = 0.3
    alpha2: float = 0.1
    lambda_ft: float = 0.2
    m_models: int = 3
    seed: int = 0
    tgc_grad: str = "double_backprop"
    selection_mode: str = "per_frame"
    transfer_reward_models: str = "heldout"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError("epsilon must be > 0")
        if not self.eta > 0:
            raise ContractError("eta must be > 0")
        if self.n_iter < 0:
            raise ContractError("n_iter must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError("beta must lie in [0, 1]")
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            raise ContractError("alpha1 and alpha2 must be > 0")
        if self.lambda_ft < 0:
            raise ContractError("lambda_ft must be >= 0")
        if self.m_models < 1:
            raise ContractError("m_models must be >= 1")
        if self.tgc_grad not in ("double_backprop", "detached"):
            raise ContractError(f"unknown tgc_grad {self.tgc_grad!r}")
        if self.selection_mode not in ("per_frame", "per_video"):
            raise ContractError(f"unknown selection_mode {self.selection_mode!r}")
        if self.transfer_reward_models not in ("heldout", "targets"):
            raise ContractError(f"unknown transfer_reward_models {self.transfer_reward_models!r}")

    @classmethod
    def for_images(cls, **overrides) -> "AttackConfig":
        params = dict(epsilon=IMAGE_EPSILON, eta=IMAGE_ETA, m_models=4)
        params.update(overrides)
        return cls(**params)

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x)), True


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{what} contains non-finite values")


def project_linf(candidate, anchor, epsilon: float):
    """Clip ``candidate`` into the l-inf ball of radius ``epsilon`` around
    ``anchor``, then into [0, 1].

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    cand, from_numpy = _as_tensor(candidate)
    anch, _ = _as_tensor(anchor)
    if cand.shape != anch.shape:
        raise ContractError(f"shape mismatch: {tuple(cand.shape)} vs {tuple(anch.shape)}")
    if epsilon < 0:
        raise ContractError("epsilon must be >= 0")
    _check_finite(cand, "candidate")
    _check_finite(anch, "anchor")
    anch = anch.to(cand.dtype)
    out = torch.minimum(torch.maximum(cand, anch - epsilon), anch + epsilon)
    out = out.clamp(0.0, 1.0)
    return out.numpy() if from_numpy else out


def sign_step(x, grad, eta: float):
    """``x + eta * sign(grad)`` with sign(0) = 0."""
    xt, from_numpy = _as_tensor(x)
    gt, _ = _as_tensor(grad)
    if xt.shape != gt.shape:
        raise ContractError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(gt.shape)}")
    _check_finite(gt, "gradient")
    out = xt + eta * torch.sign(gt).to(xt.dtype)
    return out.numpy() if from_numpy else out
