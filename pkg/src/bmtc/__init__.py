"""Background-mixup transfer attacks against video classifiers, at toy scale."""

from .attack import attack_batch, background_attack_loss, generate_adversarial, mi_baseline, pgd_baseline, tgc_loss
from .dataio import DatasetSpec, extract_background, generate_synthetic_dataset, load_dataset, save_dataset
from .errors import (AttackAborted, BlackBoxViolation, BMTCError, ContractError, CoverageError,
                     DegenerateMaskError, NumericError)
from .evaluate import MatrixReport, asr, run_matrix, select_eval_set
from .mixer import (MixerPolicy, RewardModel, Selection, admix, attack_reward, oracle_select, tbc_reward,
                    total_reward, train_policy, transfer_reward)
from .models import ModelHandle, build_model
from .pool import BackgroundPool, build_pool, finetune_loss, finetune_surrogate
from .tensors import AttackConfig, Perturbation, VideoClip, project_linf

__version__ = "0.1.0"
