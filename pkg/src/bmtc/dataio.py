"""Synthetic background-correlated action clips and their on-disk format.

Every category pairs one motion direction of a small bright sprite (the
"action") with one oriented color grating (the "background").  With
probability ``correlation_strength`` a clip uses its own category's grating,
otherwise a uniformly drawn grating of another category, so a classifier can
lean on either cue.  Pixels are snapped to the 8-bit grid so clips survive a
PNG round trip bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, DegenerateMaskError, LengthError
from .tensors import VideoClip

SPRITE_SIZE = 7
SPRITE_SPEED = 2.0
SPRITE_COLOR = np.array([0.8, 0.76, 0.72])
TEXTURE_BASE = 0.45
TEXTURE_AMPLITUDE = 0.12
LUMINANCE_THRESHOLD = 0.7
MOTION_ARC = 2.0 * np.pi

MANIFEST_NAME = "manifest.tsv"
META_NAME = "meta.json"


@dataclass
class DatasetSpec:
    k_categories: int = 5
    clips_per_category: int = 40
    t_frames: int = 8
    height: int = 32
    width: int = 32
    correlation_strength: float = 0.9
    seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.k_categories < 2:
            raise ContractError("k_categories must be >= 2")
        if self.t_frames < 1:
            raise ContractError("t_frames must be >= 1")
        if self.clips_per_category < 1:
            raise ContractError("clips_per_category must be >= 1")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ContractError("correlation_strength must lie in [0, 1]")
        if min(self.height, self.width) < 2 * SPRITE_SIZE:
            raise ContractError("frames too small for the sprite")
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError("test_fraction must lie in (0, 1)")


@dataclass
class ForegroundMask:
    """Boolean T x H x W array, True on foreground pixels."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise ContractError(f"mask must be T x H x W, got {self.mask.shape}")

    def check(self, clip: VideoClip) -> None:
        if self.mask.shape != clip.frames.shape[:3]:
            raise ContractError(
                f"mask shape {self.mask.shape} does not match clip {clip.frames.shape[:3]}"
            )


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    train: list
    test: list
    masks: dict = field(default_factory=dict)
    backgrounds: dict = field(default_factory=dict)
    background_ids: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.spec.k_categories

    def all_clips(self):
        return list(self.train) + list(self.test)

    def clips_of(self, category: int, split: str = "train"):
        clips = self.train if split == "train" else self.test
        return [c for c in clips if c.label == category]

    def mask_for(self, clip: VideoClip) -> ForegroundMask:
        return self.masks[clip.clip_id]


def quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def background_texture(category: int, k: int, height: int, width: int, phase: float = 0.0):
    """Oriented two-color grating that identifies ``category``."""
    theta = np.pi * category / k
    freq = 2.0 * np.pi * (2.0 + (category % 3)) / max(height, width)
    hue = 2.0 * np.pi * category / k
    color_a = TEXTURE_BASE + TEXTURE_AMPLITUDE * np.cos(hue + np.array([0.0, 2.1, 4.2]))
    color_b = TEXTURE_BASE + TEXTURE_AMPLITUDE * np.cos(hue + np.pi + np.array([0.0, 2.1, 4.2]))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    wave = 0.5 + 0.5 * np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = color_a[None, None, :] * wave[..., None] + color_b[None, None, :] * (1.0 - wave[..., None])
    return np.clip(img, 0.0, 1.0)


def sprite_track(category: int, k: int, t_frames: int, height: int, width: int, rng):
    """Top-left sprite corners for a straight track along the category's direction."""
    angle = MOTION_ARC * category / k
    step = SPRITE_SPEED * np.array([np.sin(angle), np.cos(angle)])
    span = step * (t_frames - 1)
    lo = np.maximum(0.0, -span)
    hi = np.array([height - SPRITE_SIZE, width - SPRITE_SIZE], dtype=float) - np.maximum(0.0, span)
    start = lo + rng.random(2) * np.maximum(hi - lo, 0.0)
    track = start[None, :] + np.arange(t_frames)[:, None] * step[None, :]
    return np.round(track).astype(int)


def _render_clip(category, bg_category, spec, rng):
    k, t, h, w = spec.k_categories, spec.t_frames, spec.height, spec.width
    phase = rng.uniform(0.0, 2.0 * np.pi)
    background = quantize(background_texture(bg_category, k, h, w, phase))
    frames = np.repeat(background[None], t, axis=0).copy()
    mask = np.zeros((t, h, w), dtype=bool)
    for ti, (r, c) in enumerate(sprite_track(category, k, t, h, w, rng)):
        frames[ti, r:r + SPRITE_SIZE, c:c + SPRITE_SIZE, :] = SPRITE_COLOR
        mask[ti, r:r + SPRITE_SIZE, c:c + SPRITE_SIZE] = True
    return quantize(frames), mask, background


def generate_synthetic_dataset(spec: DatasetSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    k = spec.k_categories
    train, test = [], []
    masks, backgrounds, bg_ids = {}, {}, {}
    n_test = max(1, int(round(spec.clips_per_category * spec.test_fraction)))
    if spec.clips_per_category > 1:
        n_test = min(n_test, spec.clips_per_category - 1)
    for category in range(k):
        clips = []
        for i in range(spec.clips_per_category):
            if rng.random() < spec.correlation_strength:
                bg = category
            else:
                others = [j for j in range(k) if j != category]
                bg = int(others[rng.integers(len(others))])
            frames, mask, background = _render_clip(category, bg, spec, rng)
            clip_id = f"c{category:02d}_{i:04d}"
            clips.append(VideoClip(frames, category, clip_id))
            masks[clip_id] = ForegroundMask(mask)
            backgrounds[clip_id] = background
            bg_ids[clip_id] = bg
        order = rng.permutation(len(clips))
        if spec.clips_per_category == 1:
            train.extend(clips)
            continue
        test_idx = set(order[:n_test].tolist())
        for j, clip in enumerate(clips):
            (test if j in test_idx else train).append(clip)
    return SyntheticDataset(spec, train, test, masks, backgrounds, bg_ids)


def luminance_mask(clip: VideoClip, threshold: float = LUMINANCE_THRESHOLD) -> ForegroundMask:
    """Fallback segmentation for clips without ground-truth masks."""
    lum = clip.frames @ np.array([0.299, 0.587, 0.114])
    return ForegroundMask(lum > threshold)


def extract_background(clip: VideoClip, mask: ForegroundMask, strategy: str = "nearest_background_pixel",
                       frame_index: int = 0) -> np.ndarray:
    """Return frame ``frame_index`` of ``clip`` with its foreground removed.

    ``inpaint_mean`` fills foreground pixels with the mean color of the
    frame's background pixels.  ``nearest_background_pixel`` takes each
    foreground pixel from the temporally nearest frame where that location
    is background, falling back to the spatially nearest background pixel
    of the same frame when the location is foreground in every frame.
    """
    mask.check(clip)
    frames = clip.frames
    m = mask.mask
    frame = frames[frame_index].astype(np.float64).copy()
    fg = m[frame_index]
    if not fg.any():
        return frames[frame_index].copy()
    if fg.all():
        raise DegenerateMaskError(f"clip {clip.clip_id!r}: frame {frame_index} is entirely foreground")

    if strategy == "inpaint_mean":
        frame[fg] = frame[~fg].mean(axis=0)
    elif strategy == "nearest_background_pixel":
        filled = np.zeros_like(fg)
        order = sorted(range(frames.shape[0]), key=lambda t: (abs(t - frame_index), t))
        for t in order[1:]:
            take = fg & ~filled & ~m[t]
            frame[take] = frames[t][take]
            filled |= take
            if filled[fg].all():
                break
        rest = fg & ~filled
        if rest.any():
            _, (rows, cols) = ndimage.distance_transform_edt(fg, return_indices=True)
            frame[rest] = frame[rows[rest], cols[rest]]
    else:
        raise ContractError(f"unknown strategy {strategy!r}")
    return np.clip(frame, 0.0, 1.0).astype(clip.frames.dtype)


def sample_clip(frames, policy: str, t_out: int, seed: int, label: int = 0, clip_id: str = "") -> VideoClip:
    """Cut ``t_out`` frames out of a longer sequence.

    ``consecutive`` takes a contiguous run from a seeded random start;
    ``skip_alternate`` takes a ``2 * t_out`` window and keeps every other
    frame.
    """
    frames = np.asarray(frames)
    n = frames.shape[0]
    if t_out < 1:
        raise ContractError("t_out must be >= 1")
    window = {"consecutive": t_out, "skip_alternate": 2 * t_out}.get(policy)
    if window is None:
        raise ContractError(f"unknown policy {policy!r}")
    if n < window:
        raise LengthError(f"{policy} with t_out={t_out} needs {window} frames, got {n}")
    start = int(np.random.default_rng(seed).integers(0, n - window + 1))
    picked = frames[start:start + window:(2 if policy == "skip_alternate" else 1)]
    return VideoClip(picked.copy(), label, clip_id)


# -- on-disk format -------------------------------------------------------

def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frame(frame: np.ndarray, path) -> None:
    Image.fromarray(frame_to_uint8(frame), mode="RGB").save(path, format="PNG", optimize=False)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_clip(clip: VideoClip, directory, extra_meta=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        save_frame(frame, directory / f"frame_{t:05d}.png")
    meta = {"label": clip.label, "clip_id": clip.clip_id, "n_frames": clip.n_frames}
    if extra_meta:
        meta.update(extra_meta)
    (directory / META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return directory


def load_clip(directory) -> VideoClip:
    directory = Path(directory)
    meta_path = directory / META_NAME
    if not meta_path.is_file():
        raise ContractError(f"{directory} has no {META_NAME}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise ContractError(f"{directory} has no frames")
    frames = np.stack([load_frame(p) for p in paths])
    return VideoClip(frames, int(meta["label"]), str(meta.get("clip_id", directory.name)))


def save_dataset(dataset: SyntheticDataset, root) -> Path:
    """Write every clip plus its mask and a line-oriented manifest.

    Manifest lines are ``clip_dir<TAB>label<TAB>split<TAB>background_id``
    after one header line.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["clip_dir\tlabel\tsplit\tbackground_id"]
    for split, clips in (("train", dataset.train), ("test", dataset.test)):
        for clip in clips:
            rel = f"clips/{clip.clip_id}"
            save_clip(clip, root / rel)
            if clip.clip_id in dataset.masks:
                np.save(root / rel / "mask.npy", dataset.masks[clip.clip_id].mask)
            lines.append(f"{rel}\t{clip.label}\t{split}\t{dataset.background_ids.get(clip.clip_id, -1)}")
    spec = dict(vars(dataset.spec))
    (root / "dataset.json").write_text(json.dumps(spec, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    _atomic_write(root / MANIFEST_NAME, "\n".join(lines) + "\n")
    return root


def read_manifest(root):
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise ContractError(f"no dataset manifest at {path}")
    rows = []
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("clip_dir"):
        raise ContractError(f"{path}: missing header line")
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ContractError(f"{path}:{n}: expected at least 3 tab-separated fields")
        try:
            label = int(parts[1])
            bg = int(parts[3]) if len(parts) > 3 else -1
        except ValueError as exc:
            raise ContractError(f"{path}:{n}: bad integer field") from exc
        if parts[2] not in ("train", "test"):
            raise ContractError(f"{path}:{n}: split must be train or test")
        rows.append((parts[0], label, parts[2], bg))
    return rows


def load_dataset(root) -> SyntheticDataset:
    root = Path(root)
    rows = read_manifest(root)
    spec_path = root / "dataset.json"
    if not spec_path.is_file():
        raise ContractError(f"no dataset.json under {root}")
    spec = DatasetSpec(**json.loads(spec_path.read_text(encoding="utf-8")))
    train, test, masks, bg_ids = [], [], {}, {}
    for rel, label, split, bg in rows:
        clip = load_clip(root / rel)
        if clip.label != label:
            raise ContractError(f"{rel}: manifest label {label} != meta label {clip.label}")
        (train if split == "train" else test).append(clip)
        mask_path = root / rel / "mask.npy"
        masks[clip.clip_id] = ForegroundMask(np.load(mask_path)) if mask_path.is_file() else luminance_mask(clip)
        bg_ids[clip.clip_id] = bg
    return SyntheticDataset(spec, train, test, masks, {}, bg_ids)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
