"""Background candidate pool and the dual-loss surrogate fine-tuning.

Background labels follow the one-to-one mapping ``mapped_label =
source_category + K``, so a fine-tuned surrogate carries a 2K-way head:
K action classes followed by K background classes.
"""

from __future__ import annotations

import copy
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import extract_background, load_frame, save_frame
from .errors import ContractError, CoverageError, TrainingError
from .models import accuracy, clips_to_tensor, n_outputs, widen_head
from .tensors import VideoClip

POOL_MANIFEST = "pool.tsv"


@dataclass(frozen=True)
class PoolEntry:
    frame: np.ndarray
    source_category: int
    mapped_label: int


@dataclass(frozen=True)
class BackgroundPool:
    entries: tuple
    k: int
    seed: int = 0
    source_clips: tuple = field(default=())

    def __post_init__(self):
        cats = [e.source_category for e in self.entries]
        if sorted(cats) != list(range(self.k)):
            raise ContractError(f"pool must hold exactly one entry per category, got {cats}")
        for e in self.entries:
            if e.mapped_label != e.source_category + self.k:
                raise ContractError("mapped_label must equal source_category + K")
            if e.frame.min() < 0.0 or e.frame.max() > 1.0:
                raise ContractError("pool frames must lie in [0, 1]")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> PoolEntry:
        return self.entries[i]

    def frames(self) -> np.ndarray:
        """All frames stacked as K x H x W x C, ordered by source category."""
        return np.stack([e.frame for e in self.entries])

    def candidates_for(self, label: int):
        """Candidate indices for a clip of class ``label`` (its own background excluded)."""
        return [e.source_category for e in self.entries if e.source_category != label]


def build_pool(dataset, masks=None, seed: int = 0, strategy: str = "nearest_background_pixel",
               split: str = "train") -> BackgroundPool:
    """Pick one seeded-random clip per category and strip its foreground."""
    masks = dataset.masks if masks is None else masks
    rng = np.random.default_rng(seed)
    entries, sources = [], []
    k = dataset.k
    missing = [c for c in range(k) if not dataset.clips_of(c, split)]
    if missing:
        raise CoverageError(f"no {split} clips for categories {missing}")
    for category in range(k):
        clips = dataset.clips_of(category, split)
        clip = clips[int(rng.integers(len(clips)))]
        frame = extract_background(clip, masks[clip.clip_id], strategy)
        entries.append(PoolEntry(frame.astype(np.float32), category, category + k))
        sources.append(clip.clip_id)
    return BackgroundPool(tuple(entries), k, seed, tuple(sources))


def make_background_video(entry: PoolEntry, t: int) -> VideoClip:
    if t < 1:
        raise ContractError("t must be >= 1")
    frames = np.repeat(entry.frame[None], t, axis=0)
    return VideoClip(frames, entry.mapped_label, f"back_{entry.source_category:02d}")


def finetune_loss(action_logits, action_labels, background_logits, background_labels, lambda_ft=0.2):
    """Mean action cross-entropy plus ``lambda_ft`` times mean background cross-entropy.

    Both logit tensors are over all 2K classes.  An empty background group
    contributes nothing.
    """
    two_k = action_logits.shape[-1]
    for name, labels in (("action", action_labels), ("background", background_labels)):
        if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= two_k):
            raise ContractError(f"{name} label outside [0, {two_k})")
    loss = F.cross_entropy(action_logits, action_labels)
    if len(background_labels):
        loss = loss + lambda_ft * F.cross_entropy(background_logits, background_labels)
    return loss


def finetune_surrogate(model, dataset, pool: BackgroundPool, config=None, epochs: int = 20, lr: float = 1e-3,
                       batch_size: int = 25, action_fraction: float = 1.0, seed: int = 0,
                       head_lr_scale: float = 10.0):
    """Fine-tune a copy of ``model`` on action clips plus repeated pool frames.

    A K-way model gets its head widened to 2K first.  Every batch carries all
    K background videos next to a slice of action clips.  ``action_fraction``
    limits how much of the training split is reused.  The head, whose new
    rows start near zero, trains at ``head_lr_scale`` times ``lr``.
    """
    lambda_ft = 0.2 if config is None else config.lambda_ft
    k = pool.k
    if n_outputs(model) == k:
        model = widen_head(model, k, seed=seed)
    elif n_outputs(model) == 2 * k:
        model = copy.deepcopy(model)
    else:
        raise ContractError(f"model head has {n_outputs(model)} outputs; expected {k} or {2 * k}")
    if epochs == 0:
        model.eval()
        return model

    clips = list(dataset.train)
    rng = np.random.default_rng(seed)
    if action_fraction < 1.0:
        n = max(1, int(round(len(clips) * action_fraction)))
        clips = [clips[i] for i in sorted(rng.choice(len(clips), n, replace=False))]
    t = clips[0].n_frames
    x_act = clips_to_tensor(clips)
    y_act = torch.as_tensor([c.label for c in clips], dtype=torch.long)
    x_bg = clips_to_tensor([make_background_video(e, t) for e in pool.entries])
    y_bg = torch.as_tensor([e.mapped_label for e in pool.entries], dtype=torch.long)

    gen = torch.Generator().manual_seed(seed)
    head = list(model.head.parameters())
    body = [p for p in model.parameters() if all(p is not h for h in head)]
    opt = torch.optim.Adam([{"params": body}, {"params": head, "lr": lr * head_lr_scale}], lr=lr)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(y_act), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = finetune_loss(model(x_act[idx]), y_act[idx], model(x_bg), y_bg, lambda_ft)
            if not torch.isfinite(loss):
                raise TrainingError("fine-tuning loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def background_accuracy(model, pool: BackgroundPool, t: int) -> float:
    """Fraction of pool frames (as repeated videos) classified as their mapped label."""
    videos = [make_background_video(e, t) for e in pool.entries]
    return accuracy(model, videos)


def save_pool(pool: BackgroundPool, directory) -> Path:
    """Write K PNG frames plus ``pool.tsv`` (filename, source_category,
    mapped_label, source clip).  The directory appears atomically."""
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".pool-", dir=directory.parent))
    try:
        lines = [f"# k={pool.k} seed={pool.seed}", "filename\tsource_category\tmapped_label\tsource_clip"]
        for i, e in enumerate(pool.entries):
            name = f"background_{e.source_category:03d}.png"
            save_frame(e.frame, staging / name)
            src = pool.source_clips[i] if i < len(pool.source_clips) else ""
            lines.append(f"{name}\t{e.source_category}\t{e.mapped_label}\t{src}")
        (staging / POOL_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
        os.replace(staging, directory)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return directory


def load_pool(directory) -> BackgroundPool:
    directory = Path(directory)
    path = directory / POOL_MANIFEST
    if not path.is_file():
        raise ContractError(f"no pool manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    entries, sources = [], []
    for line in lines[2:]:
        if not line.strip():
            continue
        name, cat, mapped, *rest = line.split("\t")
        entries.append(PoolEntry(load_frame(directory / name), int(cat), int(mapped)))
        sources.append(rest[0] if rest else "")
    order = np.argsort([e.source_category for e in entries])
    return BackgroundPool(tuple(entries[i] for i in order), int(header["k"]), int(header["seed"]),
                          tuple(sources[i] for i in order))
