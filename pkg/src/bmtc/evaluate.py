"""Attack success rates over surrogate x target grids.

Adversarial clips are generated once per (surrogate, attack) cell and then
shown to every target.  Targets are only ever queried for predictions.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attack import attack_batch
from .dataio import load_clip, save_clip
from .errors import AttackAborted, ContractError, CoverageError
from .mixer import RewardModel, admix_tensor, oracle_select
from .models import clips_to_tensor
from .tensors import AttackConfig, VideoClip

log = logging.getLogger(__name__)

CSV_FIELDS = ["surrogate_id", "target_id", "attack", "asr", "n_clips", "seed", "white_box_flag"]


def asr(predictions, true_labels) -> float:
    """Percentage of predictions that differ from the true labels."""
    p = np.asarray(predictions)
    y = np.asarray(true_labels)
    if p.size == 0 or p.shape != y.shape:
        raise ContractError("asr needs two non-empty sequences of equal length")
    return 100.0 * float(np.count_nonzero(p != y)) / p.size


def select_eval_set(clips, targets, k: int, seed: int = 0, per_category: int = 1):
    """Seeded draw of ``per_category`` clips per class among those every target gets right."""
    clips = list(clips)
    labels = np.array([c.label for c in clips])
    ok = np.ones(len(clips), dtype=bool)
    for t in targets:
        ok &= t.predict(clips, k) == labels
    rng = np.random.default_rng(seed)
    chosen, offenders = [], []
    for category in range(k):
        pool = [i for i in range(len(clips)) if labels[i] == category and ok[i]]
        if len(pool) < per_category:
            offenders.append(category)
            continue
        chosen.extend(sorted(rng.choice(pool, per_category, replace=False).tolist()))
    if offenders:
        raise CoverageError(f"no clip classified correctly by every target for categories {offenders}")
    return [clips[i] for i in chosen]


@dataclass
class AttackContext:
    """Everything an attack may need besides the surrogate and the clips."""

    pool: object = None
    config: AttackConfig = field(default_factory=AttackConfig)
    reward_models: list = field(default_factory=list)
    policy: object = None
    selector: str = "oracle"
    k: int = None


def _select(clips, surrogate, ctx: AttackContext) -> np.ndarray:
    if ctx.selector == "policy":
        if ctx.policy is None:
            raise ContractError("selector 'policy' needs a trained MixerPolicy")
        return ctx.policy.greedy(clips, ctx.config.selection_mode)
    rewards = RewardModel(ctx.pool, surrogate, ctx.reward_models, ctx.config, ctx.policy)
    return np.stack([oracle_select(c, ctx.pool, surrogate, ctx.reward_models, ctx.config,
                                   rewards=rewards).indices for c in clips])


def run_bmtc(clips, surrogate, ctx: AttackContext, beta=None, gamma=None):
    cfg = ctx.config if gamma is None else ctx.config.replace(gamma=gamma)
    x = clips_to_tensor(clips)
    cats = _select(clips, surrogate, ctx)
    back = torch.as_tensor(ctx.pool.frames()[cats], dtype=x.dtype)
    x0 = admix_tensor(x, back, cfg.gamma)
    return attack_batch(surrogate, x, [c.label for c in clips], cats, cfg, x_init=x0, k=ctx.k, beta=beta)


def run_pgd(clips, surrogate, ctx: AttackContext):
    x = clips_to_tensor(clips)
    return attack_batch(surrogate, x, [c.label for c in clips], None, ctx.config, loss_kind="ce", k=ctx.k, beta=0.0)


def run_mi(clips, surrogate, ctx: AttackContext, decay: float = 1.0):
    x = clips_to_tensor(clips)
    return attack_batch(surrogate, x, [c.label for c in clips], None, ctx.config, loss_kind="ce", k=ctx.k,
                        beta=0.0, momentum=decay)


ATTACKS = {
    "bmtc": run_bmtc,
    "pgd_baseline": run_pgd,
    "mi_baseline": run_mi,
    "bmtc_no_tgc": lambda clips, s, ctx: run_bmtc(clips, s, ctx, beta=0.0),
    "bmtc_no_mixup": lambda clips, s, ctx: run_bmtc(clips, s, ctx, gamma=0.0),
}
DEFAULT_ATTACKS = ("bmtc", "pgd_baseline", "mi_baseline")


@dataclass
class CellResult:
    surrogate_id: str
    attack: str
    adversarial: list
    traces: list
    failed: list = field(default_factory=list)


@dataclass
class MatrixReport:
    rows: list
    config: dict
    warnings: int = 0
    cells: list = field(default_factory=list, repr=False)

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({f: _fmt(row[f]) for f in CSV_FIELDS})
        return buf.getvalue()

    def attack_means(self) -> dict:
        """Per attack: mean ASR over cross-family cells, same-family cells, and every surrogate/target cell."""
        out = {}
        for name in dict.fromkeys(r["attack"] for r in self.rows):
            rows = [r for r in self.rows if r["attack"] == name]
            transfer = [r["asr"] for r in rows if not r["white_box_flag"]]
            white = [r["asr"] for r in rows if r["white_box_flag"]]
            grid = [r["asr"] for r in rows if r["target_id"] != r["surrogate_id"]]
            out[name] = {
                "mean_transfer_asr": float(np.mean(transfer)) if transfer else None,
                "mean_white_box_asr": float(np.mean(white)) if white else None,
                "mean_grid_asr": float(np.mean(grid)) if grid else None,
                "n_cells": len(rows),
            }
        return out

    def summary(self) -> dict:
        return {"config_hash": self.config_hash(), "config": self.config, "warnings": self.warnings,
                "attacks": self.attack_means(), "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=1, default=str) + "\n"

    def write(self, directory, formats=("csv", "json")) -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        if "csv" in formats:
            (directory / "matrix.csv").write_text(self.to_csv(), encoding="utf-8")
            written.append(directory / "matrix.csv")
        if "json" in formats:
            (directory / "summary.json").write_text(self.to_json(), encoding="utf-8")
            written.append(directory / "summary.json")
        return written


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.4f}"
    return v


def is_white_box(surrogate, target) -> bool:
    """Flag cells whose target shares the surrogate's architecture family (or is the surrogate itself)."""
    if target.model_id == surrogate.model_id:
        return True
    return bool(surrogate.arch) and surrogate.arch == target.arch


def generate_cell(surrogate, attack: str, clips, ctx: AttackContext, cache_dir=None) -> CellResult:
    """Adversarial clips for one (surrogate, attack) pair, read from ``cache_dir`` when present."""
    cell_dir = Path(cache_dir) / surrogate.model_id / attack if cache_dir else None
    if cell_dir is not None and (cell_dir / "done").is_file():
        failed = (cell_dir / "done").read_text(encoding="utf-8").split()
        adv = [load_clip(cell_dir / c.clip_id) for c in clips if c.clip_id not in failed]
        return CellResult(surrogate.model_id, attack, adv, [], failed)
    fn = ATTACKS[attack]
    adv, traces, failed = [], [], []
    try:
        x_adv, traces = fn(clips, surrogate, ctx)
        adv = [c.with_frames(a.numpy()) for c, a in zip(clips, x_adv)]
    except AttackAborted:
        # retry clip by clip so one bad clip does not sink the cell
        for c in clips:
            try:
                x_adv, tr = fn([c], surrogate, ctx)
                adv.append(c.with_frames(x_adv[0].numpy()))
                traces.extend(tr)
            except AttackAborted as exc:
                log.warning("attack %s on %s failed for clip %s: %s", attack, surrogate.model_id, c.clip_id, exc)
                failed.append(c.clip_id)
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        for a in adv:
            save_clip(a, cell_dir / a.clip_id)
        (cell_dir / "done").write_text("\n".join(failed) + "\n", encoding="utf-8")
    return CellResult(surrogate.model_id, attack, adv, traces, failed)


def run_matrix(surrogates, targets, attacks, clips, pool, config: AttackConfig, reward_models=None,
               policy=None, selector: str = "oracle", jobs: int = 1, cache_dir=None,
               include_surrogates: bool = False) -> MatrixReport:
    """Every attack from every surrogate against every target.

    ``reward_models`` feed the transfer reward; with
    ``config.transfer_reward_models == "targets"`` the target handles are
    used instead (still inference-only).  ``include_surrogates`` adds a
    row per cell scoring the surrogate itself on its K action logits.
    """
    unknown = [a for a in attacks if a not in ATTACKS]
    if unknown:
        raise ContractError(f"unknown attacks {unknown}; known: {sorted(ATTACKS)}")
    if not targets:
        raise ContractError("run_matrix needs at least one target")
    if not clips:
        raise ContractError("run_matrix needs a non-empty evaluation set")
    k = pool.k
    rewards = list(targets) if config.transfer_reward_models == "targets" else list(reward_models or [])
    ctx = AttackContext(pool, config, rewards, policy, selector, k)
    labels = np.array([c.label for c in clips])

    jobs_list = [(s, a) for s in surrogates for a in attacks]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(lambda sa: generate_cell(sa[0], sa[1], clips, ctx, cache_dir), jobs_list))
    else:
        cells = [generate_cell(s, a, clips, ctx, cache_dir) for s, a in jobs_list]

    rows, warnings = [], 0
    for (surrogate, attack), cell in zip(jobs_list, cells):
        warnings += len(cell.failed)
        kept = [i for i, c in enumerate(clips) if c.clip_id not in set(cell.failed)]
        if not kept:
            continue
        adv = cell.adversarial
        y = labels[kept]
        scored = [(t, is_white_box(surrogate, t)) for t in targets]
        if include_surrogates:
            scored.append((surrogate, True))
        for target, white in scored:
            preds = target.predict(adv, k)
            rows.append({"surrogate_id": surrogate.model_id, "target_id": target.model_id, "attack": attack,
                         "asr": asr(preds, y), "n_clips": len(kept), "seed": config.seed,
                         "white_box_flag": bool(white)})
    snapshot = config.as_dict()
    snapshot.update(selector=selector, attacks=list(attacks), clip_ids=[c.clip_id for c in clips],
                    surrogates=[s.model_id for s in surrogates], targets=[t.model_id for t in targets])
    return MatrixReport(rows, snapshot, warnings, cells)


def mean_grad_cosine(traces) -> float:
    """Mean consecutive-frame gradient cosine over all clips and iterates."""
    values = [b.mean_grad_cosine for trace in traces for b in trace]
    return float(np.mean(values)) if values else 0.0


def background_prob_gain(traces) -> float:
    """Fraction of clips whose background-class probability ends at least where it started."""
    ups = [trace[-1].p_background >= trace[0].p_background for trace in traces if trace]
    return float(np.mean(ups)) if ups else float("nan")


def black_box_requests(targets) -> int:
    return sum(t.grad_requests for t in targets)


def transfer_asr(report: MatrixReport, attack: str, cells: str = "grid") -> float:
    """``cells="grid"`` averages every surrogate/target cell, ``"cross"`` only the cross-family ones."""
    key = "mean_grid_asr" if cells == "grid" else "mean_transfer_asr"
    return report.attack_means()[attack][key]


def adversarial_clips(report: MatrixReport, surrogate_id: str, attack: str):
    for cell in report.cells:
        if cell.surrogate_id == surrogate_id and cell.attack == attack:
            return cell.adversarial
    raise KeyError((surrogate_id, attack))


def clean_predictions(models, clips, k):
    return {m.model_id: m.predict(clips, k) for m in models}


__all__ = [
    "ATTACKS", "AttackContext", "MatrixReport", "asr", "run_matrix", "select_eval_set", "VideoClip",
]
