"""The desk-scale toy setup: dataset, model zoo, pool, fine-tuned surrogates
and Mixer policy, built deterministically from one seed and cacheable on disk."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .dataio import DatasetSpec, generate_synthetic_dataset, load_dataset, save_dataset
from .mixer import MixerPolicy, train_policy
from .models import ModelHandle, accuracy, build_model, load_model, save_model, train_classifier
from .pool import build_pool, finetune_surrogate, load_pool, save_pool
from .tensors import AttackConfig

log = logging.getLogger(__name__)

# (model_id, architecture, width, role)
ZOO = (
    ("c3d-w16", "c3d", 16, "surrogate"),
    ("tp2d-w16", "tp2d", 16, "surrogate"),
    ("c3d-w8", "c3d", 8, "target"),
    ("tp2d-w8", "tp2d", 8, "target"),
    ("r21d-a", "r21d", 8, "auxiliary"),
    ("r21d-b", "r21d", 12, "auxiliary"),
    ("r21d-c", "r21d", 16, "auxiliary"),
)

TRAIN_EPOCHS = 15
TRAIN_LR = 2e-3
POLICY_EPISODES = 3000


@dataclass
class ToySetup:
    seed: int
    dataset: object
    zoo: dict
    pool: object
    surrogates: dict
    config: AttackConfig
    policy: object = None
    clean_accuracy: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.dataset.k

    def ids(self, role):
        return [mid for mid, _, _, r in ZOO if r == role and mid in self.zoo]

    def surrogate_handles(self):
        out = []
        for mid in self.ids("surrogate"):
            h = ModelHandle(f"{mid}-ft", self.surrogates[mid], "surrogate")
            h.source_id = mid
            out.append(h)
        return out

    def target_handles(self):
        return [ModelHandle(mid, self.zoo[mid], "target") for mid in self.ids("target")]

    def auxiliary_handles(self):
        return [ModelHandle(mid, self.zoo[mid], "auxiliary") for mid in self.ids("auxiliary")]


def build_toy_setup(seed: int = 0, spec: DatasetSpec = None, config: AttackConfig = None,
                    with_policy: bool = True, policy_episodes: int = POLICY_EPISODES,
                    cache_dir=None) -> ToySetup:
    """Train (or load from ``cache_dir``) the complete toy setup for ``seed``."""
    spec = spec or DatasetSpec(seed=seed)
    config = config or AttackConfig(seed=seed)
    root = Path(cache_dir) / f"seed{seed}" if cache_dir else None
    if root is not None and (root / "done.json").is_file():
        setup = load_toy_setup(root, config)
        if setup.policy is not None or not with_policy:
            return setup
        setup.policy = _train_policy(setup, policy_episodes)
        _save_policy(setup.policy, root / "policy.pt")
        return setup

    dataset = generate_synthetic_dataset(spec)
    zoo = {}
    for n, (mid, arch, width, _) in enumerate(ZOO):
        model = build_model(arch, spec.k_categories, width, act="elu", seed=1000 * seed + n)
        train_classifier(model, dataset.train, epochs=TRAIN_EPOCHS, lr=TRAIN_LR, seed=seed)
        zoo[mid] = model
    pool = build_pool(dataset, seed=seed)
    surrogates = {mid: finetune_surrogate(zoo[mid], dataset, pool, config, seed=seed)
                  for mid, _, _, role in ZOO if role == "surrogate"}
    acc = {mid: accuracy(m, dataset.test) for mid, m in zoo.items()}
    acc.update({f"{mid}-ft": accuracy(m, dataset.test, k=spec.k_categories) for mid, m in surrogates.items()})
    setup = ToySetup(seed, dataset, zoo, pool, surrogates, config, None, acc)
    if with_policy:
        setup.policy = _train_policy(setup, policy_episodes)
    if root is not None:
        save_toy_setup(setup, root)
    return setup


def _train_policy(setup: ToySetup, episodes: int):
    surrogate = setup.surrogates[setup.ids("surrogate")[0]]
    policy = MixerPolicy(setup.k, seed=setup.seed)
    return train_policy(policy, setup.dataset.train, setup.pool, surrogate, setup.auxiliary_handles(),
                        setup.config, episodes=episodes, seed=setup.seed)


def _save_policy(policy, path):
    torch.save(policy.state_dict(), path)
    meta = {"k": policy.k, "baseline": policy.baseline, "steps": policy.steps}
    Path(path).with_suffix(".json").write_text(json.dumps(meta) + "\n", encoding="utf-8")


def load_policy(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    policy = MixerPolicy(meta["k"])
    policy.load_state_dict(torch.load(path, weights_only=True))
    policy.baseline, policy.steps = meta["baseline"], meta["steps"]
    policy.eval()
    return policy


def save_toy_setup(setup: ToySetup, root) -> Path:
    root = Path(root)
    save_dataset(setup.dataset, root / "dataset")
    for mid, model in setup.zoo.items():
        save_model(model, root / "models" / f"{mid}.pt")
    for mid, model in setup.surrogates.items():
        save_model(model, root / "models" / "surrogates" / f"{mid}.pt")
    save_pool(setup.pool, root / "pool")
    if setup.policy is not None:
        _save_policy(setup.policy, root / "policy.pt")
    meta = {"seed": setup.seed, "clean_accuracy": setup.clean_accuracy}
    (root / "done.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return root


def load_toy_setup(root, config: AttackConfig = None) -> ToySetup:
    root = Path(root)
    meta = json.loads((root / "done.json").read_text(encoding="utf-8"))
    dataset = load_dataset(root / "dataset")
    zoo = {mid: load_model(root / "models" / f"{mid}.pt") for mid, *_ in ZOO if (root / "models" / f"{mid}.pt").is_file()}
    surrogates = {p.stem: load_model(p) for p in sorted((root / "models" / "surrogates").glob("*.pt"))}
    pool = load_pool(root / "pool")
    policy = load_policy(root / "policy.pt") if (root / "policy.pt").is_file() else None
    config = config or AttackConfig(seed=meta["seed"])
    return ToySetup(meta["seed"], dataset, zoo, pool, surrogates, config, policy, meta["clean_accuracy"])
