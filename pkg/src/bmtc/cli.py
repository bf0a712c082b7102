"""Command-line entry point.

Settings come from a flat ``key = value`` file, then ``BMTC_<KEY>``
environment variables, then ``--key value`` flags (last one wins).
Exit codes: 0 success, 1 internal error or failed matrix cells, 2 user or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import dataio, evaluate, experiment, mixer, models, plotting, pool as poolmod
from .attack import LossBreakdown, attack_batch
from .errors import BMTCError, ContractError
from .tensors import AttackConfig

log = logging.getLogger("bmtc")

ENV_PREFIX = "BMTC_"
COMMANDS = ("build-dataset", "build-pool", "finetune", "train-mixer", "attack", "evaluate", "report")


class UserError(Exception):
    """Bad configuration or missing inputs; maps to exit code 2."""


@dataclass
class RunConfig:
    # attack
    epsilon: float = 16 / 255
    eta: float = 1.6 / 255
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
    # dataset
    k_categories: int = 5
    clips_per_category: int = 40
    t_frames: int = 8
    height: int = 32
    width: int = 32
    correlation_strength: float = 0.9
    # paths
    dataset_dir: str = "work/dataset"
    models_dir: str = "work/models"
    pool_dir: str = "work/pool"
    policy_path: str = "work/policy.pt"
    output_dir: str = "work/out"
    # command options
    selector: str = "oracle"
    surrogate: str = "c3d-w16"
    attacks: list = field(default_factory=lambda: list(evaluate.DEFAULT_ATTACKS))
    format: str = "both"
    jobs: int = 1
    clips: str = "eval"
    per_category: int = 1
    train_epochs: int = experiment.TRAIN_EPOCHS
    finetune_epochs: int = 20
    policy_episodes: int = experiment.POLICY_EPISODES

    def attack_config(self) -> AttackConfig:
        names = {f.name for f in fields(AttackConfig)} - {"extra"}
        return AttackConfig(**{n: getattr(self, n) for n in names})

    def dataset_spec(self) -> dataio.DatasetSpec:
        return dataio.DatasetSpec(self.k_categories, self.clips_per_category, self.t_frames, self.height,
                                  self.width, self.correlation_strength, self.seed)

    def path(self, name) -> Path:
        return Path(getattr(self, name))


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UserError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(Fraction(raw)) if "/" in raw else float(raw)
    if isinstance(default, list):
        if raw.startswith("["):
            return list(json.loads(raw))
        return [p.strip() for p in raw.split(",") if p.strip()]
    return raw


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def load_run_config(config_path=None, overrides=None, environ=None) -> RunConfig:
    defaults = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    raw = {}
    if config_path is not None:
        if not Path(config_path).is_file():
            raise UserError(f"config file {config_path} not found")
        raw.update(read_config_file(config_path))
    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            raw[key[len(ENV_PREFIX):].lower()] = value
    raw.update({k.replace("-", "_"): v for k, v in (overrides or {}).items()})
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise UserError(f"unknown config keys: {', '.join(unknown)}")
    parsed = {}
    for key, value in raw.items():
        try:
            parsed[key] = _parse_value(value, getattr(defaults, key))
        except (ValueError, ZeroDivisionError, json.JSONDecodeError) as exc:
            raise UserError(f"bad value for {key}: {value!r}") from exc
    cfg = dataclasses.replace(defaults, **parsed)
    if cfg.selector not in ("oracle", "policy"):
        raise UserError("selector must be 'oracle' or 'policy'")
    if cfg.format not in ("csv", "json", "both"):
        raise UserError("format must be csv, json or both")
    if cfg.clips not in ("eval", "test"):
        raise UserError("clips must be 'eval' or 'test'")
    try:
        cfg.attack_config()
        cfg.dataset_spec()
    except ContractError as exc:
        raise UserError(str(exc)) from exc
    return cfg


def _require(path: Path, what: str):
    if not path.exists():
        raise UserError(f"{what} not found at {path}")
    return path


# -- loading helpers ------------------------------------------------------

def _dataset(cfg):
    root = _require(cfg.path("dataset_dir"), "dataset")
    try:
        return dataio.load_dataset(root)
    except (ContractError, OSError, ValueError, KeyError) as exc:
        raise UserError(f"cannot read dataset at {root}: {exc}") from exc


def _zoo_ids(role):
    return [mid for mid, _, _, r in experiment.ZOO if r == role]


def _model(cfg, mid, sub=""):
    path = cfg.path("models_dir") / sub / f"{mid}.pt"
    _require(path, f"model checkpoint {mid!r}")
    return models.load_model(path)


def _surrogate_handle(cfg, mid):
    h = models.ModelHandle(f"{mid}-ft", _model(cfg, mid, "surrogates"), "surrogate")
    h.source_id = mid
    return h


def _targets(cfg):
    ids = _zoo_ids("target")
    if not ids:
        raise UserError("no targets configured")
    return [models.ModelHandle(mid, _model(cfg, mid), "target") for mid in ids]


def _aux(cfg):
    return [models.ModelHandle(mid, _model(cfg, mid), "auxiliary") for mid in _zoo_ids("auxiliary")]


def _pool(cfg):
    _require(cfg.path("pool_dir") / poolmod.POOL_MANIFEST, "background pool")
    return poolmod.load_pool(cfg.path("pool_dir"))


def _policy(cfg):
    _require(cfg.path("policy_path"), "mixer policy")
    return experiment.load_policy(cfg.path("policy_path"))


def _clips(cfg, dataset, targets):
    if cfg.clips == "test":
        return list(dataset.test)
    return evaluate.select_eval_set(dataset.test, targets, dataset.k, cfg.seed, cfg.per_category)


# -- commands -------------------------------------------------------------

def cmd_build_dataset(cfg):
    dataset = dataio.generate_synthetic_dataset(cfg.dataset_spec())
    out = cfg.path("dataset_dir")
    staging = Path(tempfile.mkdtemp(prefix=".dataset-", dir=_ensure_parent(out)))
    try:
        dataio.save_dataset(dataset, staging)
        if out.exists():
            shutil.rmtree(out)
        os.replace(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(f"dataset: {len(dataset.train)} train / {len(dataset.test)} test clips, K={dataset.k} -> {out}")
    return 0


def cmd_build_pool(cfg):
    dataset = _dataset(cfg)
    try:
        pool = poolmod.build_pool(dataset, seed=cfg.seed)
    except ContractError as exc:
        raise UserError(str(exc)) from exc
    out = poolmod.save_pool(pool, cfg.path("pool_dir"))
    for e, src in zip(pool.entries, pool.source_clips):
        print(f"category {e.source_category} -> label {e.mapped_label} (from {src})")
    print(f"pool: {len(pool)} frames -> {out}")
    return 0


def cmd_finetune(cfg):
    dataset = _dataset(cfg)
    pool = _pool(cfg)
    mdir = cfg.path("models_dir")
    for n, (mid, arch, width, _) in enumerate(experiment.ZOO):
        path = mdir / f"{mid}.pt"
        if path.is_file():
            continue
        model = models.build_model(arch, dataset.k, width, act="elu", seed=1000 * cfg.seed + n)
        models.train_classifier(model, dataset.train, epochs=cfg.train_epochs, lr=experiment.TRAIN_LR, seed=cfg.seed)
        models.save_model(model, path)
        print(f"trained {mid}: test accuracy {models.accuracy(model, dataset.test):.3f}")
    for mid in _zoo_ids("surrogate"):
        base = _model(cfg, mid)
        tuned = poolmod.finetune_surrogate(base, dataset, pool, cfg.attack_config(), epochs=cfg.finetune_epochs,
                                           seed=cfg.seed)
        models.save_model(tuned, mdir / "surrogates" / f"{mid}.pt")
        print(f"fine-tuned {mid}: action accuracy {models.accuracy(tuned, dataset.test, k=dataset.k):.3f}, "
              f"background accuracy {poolmod.background_accuracy(tuned, pool, dataset.spec.t_frames):.3f}")
    return 0


def cmd_train_mixer(cfg):
    dataset = _dataset(cfg)
    pool = _pool(cfg)
    surrogate = _model(cfg, cfg.surrogate, "surrogates")
    policy = mixer.MixerPolicy(dataset.k, seed=cfg.seed)
    policy = mixer.train_policy(policy, dataset.train, pool, surrogate, _aux(cfg), cfg.attack_config(),
                                episodes=cfg.policy_episodes, seed=cfg.seed)
    path = cfg.path("policy_path")
    path.parent.mkdir(parents=True, exist_ok=True)
    experiment._save_policy(policy, path)
    print(f"mixer policy trained for {cfg.policy_episodes} episodes -> {path}")
    return 0


def cmd_attack(cfg):
    dataset = _dataset(cfg)
    pool = _pool(cfg)
    surrogate = _surrogate_handle(cfg, cfg.surrogate)
    targets = _targets(cfg) if cfg.clips == "eval" else []
    policy = _policy(cfg) if cfg.selector == "policy" else None
    clips = _clips(cfg, dataset, targets)
    acfg = cfg.attack_config()
    rewards = _aux(cfg) if acfg.transfer_reward_models == "heldout" else targets
    rm = mixer.RewardModel(pool, surrogate, rewards, acfg, policy)
    if cfg.selector == "policy":
        sels = [mixer.policy_select(policy, c, rm, acfg.selection_mode) for c in clips]
    else:
        sels = [mixer.oracle_select(c, pool, surrogate, rewards, acfg, rewards=rm) for c in clips]
    x = models.clips_to_tensor(clips)
    cats = np.stack([s.indices for s in sels])
    x0 = mixer.admix_tensor(x, torch.as_tensor(pool.frames()[cats], dtype=x.dtype), acfg.gamma)
    x_adv, traces = attack_batch(surrogate, x, [c.label for c in clips], cats, acfg, x_init=x0, k=dataset.k)

    out = cfg.path("output_dir") / "attack" / surrogate.model_id
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    with open(out / "selections.jsonl", "w", encoding="utf-8") as fh:
        for s in sels:
            fh.write(s.to_jsonl())
    for clip, adv, trace in zip(clips, x_adv, traces):
        dataio.save_clip(clip.with_frames(adv.numpy()), out / "clips" / clip.clip_id, {"surrogate": surrogate.model_id})
        records = [{"iter": i, "l_back": b.l_back, "l_tgc": b.l_tgc, "l_total": b.l_total, "linf": b.linf,
                    "mean_grad_cosine": b.mean_grad_cosine} for i, b in enumerate(trace)]
        (out / "traces").mkdir(exist_ok=True)
        (out / "traces" / f"{clip.clip_id}.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    linf = float((x_adv - x).abs().max()) if len(clips) else 0.0
    print(f"attacked {len(clips)} clips with {surrogate.model_id} ({cfg.selector} selector), "
          f"max l-inf {linf * 255:.2f}/255 -> {out}")
    return 0


def cmd_evaluate(cfg):
    dataset = _dataset(cfg)
    pool = _pool(cfg)
    targets = _targets(cfg)
    surrogates = [_surrogate_handle(cfg, mid) for mid in _zoo_ids("surrogate")]
    policy = _policy(cfg) if cfg.selector == "policy" else None
    clips = _clips(cfg, dataset, targets)
    out = cfg.path("output_dir")
    report = evaluate.run_matrix(surrogates, targets, cfg.attacks, clips, pool, cfg.attack_config(),
                                 reward_models=_aux(cfg), policy=policy, selector=cfg.selector, jobs=cfg.jobs,
                                 cache_dir=out / "cache")
    formats = ("csv", "json") if cfg.format == "both" else (cfg.format,)
    for path in report.write(out, formats):
        print(f"wrote {path}")
    for cell in report.cells:
        if cell.traces:
            tdir = out / "traces" / cell.surrogate_id
            tdir.mkdir(parents=True, exist_ok=True)
            with open(tdir / f"{cell.attack}.jsonl", "w", encoding="utf-8") as fh:
                for clip, trace in zip(clips, cell.traces):
                    for i, b in enumerate(trace):
                        fh.write(json.dumps({"clip_id": clip.clip_id, "iter": i, "l_back": b.l_back,
                                             "l_tgc": b.l_tgc, "l_total": b.l_total, "linf": b.linf,
                                             "mean_grad_cosine": b.mean_grad_cosine}, sort_keys=True) + "\n")
    for name, means in report.attack_means().items():
        print(f"{name:>14}: mean grid ASR {means['mean_grid_asr']:.1f}%")
    if report.warnings:
        print(f"{report.warnings} clip attacks failed", file=sys.stderr)
        return 1
    return 0


def _read_traces(path):
    by_clip = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        by_clip.setdefault(r["clip_id"], []).append(
            LossBreakdown(r["l_back"], r["l_tgc"], r["l_total"], [r["mean_grad_cosine"]], r["linf"]))
    return list(by_clip.values())


def cmd_report(cfg):
    out = cfg.path("output_dir")
    summary_path = _require(out / "summary.json", "evaluation summary (run 'evaluate' first)")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    report = evaluate.MatrixReport(summary["rows"], summary["config"], summary.get("warnings", 0))
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    lines = ["attack\tmean_grid_asr\tmean_cross_family_asr\tmean_same_family_asr\tn_cells"]
    for name, m in report.attack_means().items():
        fmt = lambda v: "" if v is None else f"{v:.2f}"  # noqa: E731
        lines.append(f"{name}\t{fmt(m['mean_grid_asr'])}\t{fmt(m['mean_transfer_asr'])}\t"
                     f"{fmt(m['mean_white_box_asr'])}\t{m['n_cells']}")
    (rdir / "attack_means.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (rdir / "matrix.csv").write_text(report.to_csv(), encoding="utf-8")
    made = [rdir / "attack_means.tsv", rdir / "matrix.csv", plotting.plot_asr_bars(report, rdir / "asr.png")]
    tdir = out / "traces"
    if tdir.is_dir():
        for sdir in sorted(p for p in tdir.iterdir() if p.is_dir()):
            traces = {p.stem: _read_traces(p) for p in sorted(sdir.glob("*.jsonl"))}
            if traces:
                made.append(plotting.plot_traces(traces, rdir / f"traces_{sdir.name}.png"))
    print("\n".join(lines))
    for p in made:
        print(f"wrote {p}")
    return 0


HANDLERS = {
    "build-dataset": cmd_build_dataset,
    "build-pool": cmd_build_pool,
    "finetune": cmd_finetune,
    "train-mixer": cmd_train_mixer,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.parent


def build_parser():
    parser = argparse.ArgumentParser(prog="bmtc", description="Background-mixup transfer attack on toy video models")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("-c", "--config", help="key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _split_overrides(extra):
    overrides, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise UserError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UserError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config, _split_overrides(extra))
        torch.manual_seed(cfg.seed)
        return HANDLERS[args.command](cfg)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BMTCError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
