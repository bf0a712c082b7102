"""Background mixup, selection rewards, the exhaustive selector and the
REINFORCE-trained Mixer policy."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NoCandidateError, NumericError, TrainingError
from .models import clips_to_tensor
from .tensors import AttackConfig, VideoClip

COS_FLOOR = 1e-12


def admix(clip: VideoClip, background, gamma: float) -> VideoClip:
    """Per-frame ``(1 - gamma) * X_t + gamma * B_t``; the label is kept.

    ``background`` may be a VideoClip, a T x H x W x C array of per-frame
    backgrounds or a single H x W x C frame used for every frame.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma must lie in [0, 1]")
    back = np.asarray(getattr(background, "frames", background))
    if back.ndim == 3:
        back = np.broadcast_to(back, clip.frames.shape)
    if back.shape != clip.frames.shape:
        raise ContractError(f"background shape {back.shape} does not match clip {clip.frames.shape}")
    if gamma == 0.0:
        return clip.with_frames(clip.frames.copy())
    mixed = (1.0 - gamma) * clip.frames + gamma * back.astype(clip.frames.dtype)
    return clip.with_frames(np.clip(mixed, 0.0, 1.0))


def admix_tensor(x: torch.Tensor, backgrounds: torch.Tensor, gamma: float) -> torch.Tensor:
    """Batched mixup; ``backgrounds`` broadcasts against ``x`` (N, T, H, W, C)."""
    return ((1.0 - gamma) * x + gamma * backgrounds).clamp(0.0, 1.0)


def _check_probs(probs):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ContractError("probs must be a vector with at least two entries")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-5:
        raise ContractError("probs must be non-negative and sum to 1")
    return p


def attack_reward(probs, true_label: int) -> float:
    """Largest wrong-class probability minus the true-class probability."""
    p = _check_probs(probs)
    if not 0 <= true_label < p.size:
        raise ContractError(f"label {true_label} outside [0, {p.size})")
    return float(np.delete(p, true_label).max() - p[true_label])


def attack_reward_batch(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Vectorized :func:`attack_reward` over rows of ``probs``."""
    true_p = probs.gather(1, labels[:, None]).squeeze(1)
    others = probs.scatter(1, labels[:, None], float("-inf"))
    return others.max(dim=1).values - true_p


def transfer_reward(per_model_rewards) -> float:
    """Mean attack reward over the auxiliary models (divides by M)."""
    values = list(per_model_rewards)
    if not values:
        raise ContractError("transfer reward needs at least one model")
    return float(np.mean(values))


def tbc_reward(background_probs) -> float:
    """Mean cosine between predicted background distributions of consecutive frames."""
    p = np.asarray(background_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ContractError("tbc_reward needs a sequence of at least two probability vectors")
    if (p < 0).any():
        raise ContractError("probability vectors must be non-negative")
    norms = np.linalg.norm(p, axis=1)
    if (norms <= 0).any() or not np.isfinite(norms).all():
        raise NumericError("zero-norm or non-finite probability vector")
    cos = np.sum(p[:-1] * p[1:], axis=1) / (norms[:-1] * norms[1:])
    return float(np.clip(cos, 0.0, 1.0).mean())


def total_reward(r_attack, r_transfer, r_tbc, alpha1=0.3, alpha2=0.1) -> float:
    if not (alpha1 > 0 and alpha2 > 0):
        raise ContractError("alpha1 and alpha2 must be > 0")
    return r_attack + alpha1 * r_transfer + alpha2 * r_tbc


@dataclass
class RewardBreakdown:
    r_attack: float
    r_transfer: float
    r_tbc: float
    r_total: float
    candidate_index: int


@dataclass
class Selection:
    """Per-frame candidate indices plus the reward evidence behind them."""

    indices: np.ndarray
    breakdown: RewardBreakdown
    candidates: list = field(default_factory=list)
    clip_id: str = ""
    mode: str = "per_frame"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        if self.mode == "per_video" and len(set(self.indices.tolist())) > 1:
            raise ContractError("per_video selections use one candidate for every frame")

    def __len__(self):
        return len(self.indices)

    def records(self):
        """One log record per frame."""
        b = self.breakdown
        return [
            {"clip_id": self.clip_id, "frame_index": t, "candidate_index": int(c),
             "r_attack": b.r_attack, "r_transfer": b.r_transfer, "r_tbc": b.r_tbc, "r_total": b.r_total}
            for t, c in enumerate(self.indices)
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


class MixerPolicy(nn.Module):
    """Frame feature extractor with two heads.

    ``background_head`` classifies a frame into one of the K background
    categories and supplies the probabilities behind the temporal
    consistency reward.  ``select_head`` scores the K candidates for each
    frame from that frame's features and the clip-mean features.
    """

    def __init__(self, k: int, width: int = 16, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.k = k
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 5, padding=2, stride=2), nn.ELU(),
            nn.Conv2d(width, 2 * width, 3, padding=1, stride=2), nn.ELU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
        )
        dim = 8 * width
        self.background_head = nn.Linear(dim, k)
        self.select_head = nn.Sequential(nn.Linear(2 * dim, 64), nn.ELU(), nn.Linear(64, k))
        self.baseline = 0.0
        self.steps = 0

    def frame_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, D)."""
        return self.features(frames.permute(0, 3, 1, 2))

    def background_probs(self, frames: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.background_head(self.frame_features(frames)), dim=-1)

    def select_logits(self, x: torch.Tensor, labels=None) -> torch.Tensor:
        """(N, T, H, W, C) -> (N, T, K); own-category candidates masked when labels are given."""
        n, t = x.shape[:2]
        f = self.frame_features(x.reshape(n * t, *x.shape[2:])).reshape(n, t, -1)
        ctx = f.mean(dim=1, keepdim=True).expand_as(f)
        logits = self.select_head(torch.cat([f, ctx], dim=-1))
        if labels is not None:
            mask = F.one_hot(torch.as_tensor(labels), self.k).bool()[:, None, :]
            logits = logits.masked_fill(mask, float("-inf"))
        return logits

    @torch.no_grad()
    def distribution(self, clip: VideoClip) -> np.ndarray:
        """Per-frame probabilities over the K candidates (T x K)."""
        logits = self.select_logits(clips_to_tensor([clip]), [clip.label])[0]
        return torch.softmax(logits, dim=-1).numpy()

    @torch.no_grad()
    def greedy(self, clips, mode="per_frame") -> np.ndarray:
        """Greedy candidate indices, (N, T)."""
        logits = self.select_logits(clips_to_tensor(clips), [c.label for c in clips])
        if mode == "per_video":
            choice = torch.log_softmax(logits, dim=-1).mean(dim=1).argmax(dim=-1)
            return choice[:, None].expand(-1, logits.shape[1]).numpy().copy()
        return logits.argmax(dim=-1).numpy()


class RewardModel:
    """Scores per-frame background selections for a batch of clips.

    Holds the pool frames, the surrogate (first K logits are the action
    classes), the models behind the transfer reward and the Mixer whose
    background head provides the temporal consistency probabilities.
    """

    def __init__(self, pool, surrogate, transfer_models, config: AttackConfig, mixer=None):
        if not transfer_models:
            raise ContractError("the transfer reward needs at least one model")
        self.pool = pool
        self.k = pool.k
        self.surrogate = surrogate
        self.transfer_models = list(transfer_models)
        self.config = config
        dtype = torch.get_default_dtype()
        self.pool_frames = torch.as_tensor(pool.frames(), dtype=dtype)
        if mixer is not None:
            with torch.no_grad():
                self.back_probs = mixer.background_probs(self.pool_frames).to(torch.float64)
        else:
            self.back_probs = torch.eye(self.k, dtype=torch.float64)
        norms = self.back_probs.norm(dim=1)
        self.cos = (self.back_probs @ self.back_probs.T) / (norms[:, None] * norms[None, :])

    def _probs(self, model, x):
        with torch.no_grad():
            logits = model(x) if not hasattr(model, "logits") else model.logits(x)
        return torch.softmax(logits[:, :self.k].to(torch.float64), dim=1)

    def tbc(self, indices: torch.Tensor) -> torch.Tensor:
        t = indices.shape[1]
        if self.config.selection_mode == "per_video" and t >= 2:
            return torch.ones(indices.shape[0], dtype=torch.float64)
        if t < 2:
            return torch.zeros(indices.shape[0], dtype=torch.float64)
        return self.cos[indices[:, :-1], indices[:, 1:]].clamp(0.0, 1.0).mean(dim=1)

    def score(self, x: torch.Tensor, labels, indices) -> list:
        """Breakdowns for clips ``x`` (N, T, H, W, C) mixed with ``indices`` (N, T)."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        indices = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        mixed = admix_tensor(x, self.pool_frames[indices], self.config.gamma)
        r_att = attack_reward_batch(self._probs(self.surrogate, mixed), labels)
        per_model = torch.stack([attack_reward_batch(self._probs(m, mixed), labels) for m in self.transfer_models])
        r_tr = per_model.mean(dim=0)
        r_tbc = self.tbc(indices)
        a1, a2 = self.config.alpha1, self.config.alpha2
        out = []
        for i in range(len(labels)):
            ra, rt, rb = float(r_att[i]), float(r_tr[i]), float(r_tbc[i])
            out.append(RewardBreakdown(ra, rt, rb, total_reward(ra, rt, rb, a1, a2), int(indices[i, 0])))
        return out


def oracle_select(clip: VideoClip, pool, surrogate, aux_models, config: AttackConfig, mixer=None,
                  rewards: RewardModel = None) -> Selection:
    """Try every admissible candidate on all frames and keep the best total reward.

    The clip's own-category background is never a candidate.  Ties go to
    the lowest candidate index.
    """
    rewards = rewards or RewardModel(pool, surrogate, aux_models, config, mixer)
    candidates = pool.candidates_for(clip.label)
    if not candidates:
        raise NoCandidateError(f"clip {clip.clip_id!r}: every background candidate is excluded")
    t = clip.n_frames
    x = clips_to_tensor([clip] * len(candidates))
    idx = np.repeat(np.array(candidates)[:, None], t, axis=1)
    scored = rewards.score(x, [clip.label] * len(candidates), idx)
    best = scored[0]
    for b in scored[1:]:
        if b.r_total > best.r_total:
            best = b
    return Selection(np.full(t, best.candidate_index), best, scored, clip.clip_id, config.selection_mode)


def policy_select(policy: MixerPolicy, clip: VideoClip, rewards: RewardModel, mode="per_frame") -> Selection:
    idx = policy.greedy([clip], mode)
    b = rewards.score(clips_to_tensor([clip]), [clip.label], idx)[0]
    return Selection(idx[0], b, [], clip.clip_id, mode)


def pretrain_background_head(policy: MixerPolicy, pool, clips=None, steps: int = 150, lr: float = 3e-3,
                             noise: float = 0.03, seed: int = 0) -> list:
    """Supervised training of the feature extractor and background head.

    Uses the pool frames (with pixel noise and random circular shifts) and,
    when ``clips`` are given, their individual frames labelled with the
    clip's category.
    """
    gen = torch.Generator().manual_seed(seed)
    frames = torch.as_tensor(pool.frames(), dtype=torch.get_default_dtype())
    labels = torch.arange(pool.k)
    if clips:
        x = clips_to_tensor(clips)
        frames = torch.cat([frames, x.reshape(-1, *x.shape[2:])])
        labels = torch.cat([labels, torch.as_tensor([c.label for c in clips]).repeat_interleave(x.shape[1])])
    params = list(policy.features.parameters()) + list(policy.background_head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    history = []
    for _ in range(steps):
        idx = torch.randint(len(labels), (64,), generator=gen)
        batch = frames[idx]
        shift = [int(s) for s in torch.randint(-4, 5, (2,), generator=gen)]
        batch = torch.roll(batch, shifts=shift, dims=(1, 2))
        batch = (batch + noise * torch.randn(batch.shape, generator=gen, dtype=batch.dtype)).clamp(0, 1)
        loss = F.cross_entropy(policy.background_head(policy.frame_features(batch)), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


def train_policy(policy: MixerPolicy, clips, pool, surrogate, aux_models, config: AttackConfig,
                 episodes: int = 3000, batch_size: int = 32, lr: float = 3e-3, entropy_weight: float = 0.01,
                 baseline_momentum: float = 0.9, seed: int = 0, pretrain_steps: int = 150,
                 rewards: RewardModel = None) -> MixerPolicy:
    """REINFORCE with a moving-average baseline; one episode is one clip.

    Returns a trained copy.  ``episodes`` counts clips, processed in batches
    of ``batch_size``; zero episodes returns an unchanged copy.
    """
    policy = copy.deepcopy(policy)
    if episodes <= 0:
        return policy
    gen = torch.Generator().manual_seed(seed)
    if pretrain_steps:
        pretrain_background_head(policy, pool, clips, steps=pretrain_steps, seed=seed)
    rewards = rewards or RewardModel(pool, surrogate, aux_models, config, policy)
    x_all = clips_to_tensor(clips)
    y_all = torch.as_tensor([c.label for c in clips], dtype=torch.long)
    opt = torch.optim.Adam(policy.select_head.parameters(), lr=lr)
    done = 0
    while done < episodes:
        n = min(batch_size, episodes - done)
        idx = torch.randint(len(y_all), (n,), generator=gen)
        x, y = x_all[idx], y_all[idx]
        with torch.no_grad():
            feats = policy.frame_features(x.reshape(-1, *x.shape[2:])).reshape(n, x.shape[1], -1)
        ctx = feats.mean(dim=1, keepdim=True).expand_as(feats)
        logits = policy.select_head(torch.cat([feats, ctx], dim=-1))
        logits = logits.masked_fill(F.one_hot(y, policy.k).bool()[:, None, :], float("-inf"))
        log_p = torch.log_softmax(logits, dim=-1)
        if config.selection_mode == "per_video":
            clip_logp = log_p.mean(dim=1)
            choice = torch.multinomial(clip_logp.exp(), 1, generator=gen)
            actions = choice.expand(-1, x.shape[1])
            act_logp = clip_logp.gather(1, choice).squeeze(1)
        else:
            probs = log_p.exp()
            actions = torch.multinomial(probs.reshape(-1, policy.k), 1, generator=gen).reshape(n, -1)
            act_logp = log_p.gather(2, actions[..., None]).squeeze(-1).sum(dim=1)
        scored = rewards.score(x, y, actions.numpy())
        r = torch.tensor([s.r_total for s in scored], dtype=log_p.dtype)
        if not torch.isfinite(r).all():
            raise TrainingError("reward became non-finite")
        if policy.steps == 0:
            policy.baseline = float(r.mean())
        adv = r - policy.baseline
        p_safe = log_p.exp()
        entropy = -(p_safe * log_p.masked_fill(p_safe == 0, 0.0)).sum(dim=-1).mean()
        loss = -(adv * act_logp).mean() - entropy_weight * entropy
        opt.zero_grad()
        loss.backward()
        opt.step()
        policy.baseline = baseline_momentum * policy.baseline + (1 - baseline_momentum) * float(r.mean())
        policy.steps += 1
        done += n
    return policy


def agreement(policy: MixerPolicy, clips, oracle_selections, mode="per_frame") -> float:
    """Fraction of clips whose greedy selection matches the oracle on every frame."""
    if not clips:
        raise ContractError("agreement over an empty clip list")
    greedy = policy.greedy(clips, mode)
    hits = [np.array_equal(g, s.indices) for g, s in zip(greedy, oracle_selections)]
    return float(np.mean(hits))


def breakdown_dict(b: RewardBreakdown) -> dict:
    return asdict(b)
