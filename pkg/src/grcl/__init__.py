"""Continual domain adaptation with gradient-regularized contrastive
learning, on desk-scale synthetic benchmarks."""

from .contrast import (ContrastItem, FeatureBank, build_feature_bank,
                       contrastive_batch_loss, info_nce, sample_negatives,
                       update_key)
from .domains import (AugmentSpec, DomainDataset, DomainSequenceSpec,
                      augment, generate_sequence, load_dataset, save_dataset)
from .gradproj import (ConstraintSet, ProjectionResult, check_violation,
                       oracle_project, project)
from .memory import (DomainMemory, EpisodicMemory, kmeans, pseudo_label,
                     sample_memory_batch, select_episodic)
from .metrics import (AccuracyMatrix, compute_acc, compute_bwt,
                      evaluate_accuracy)
from .model import (Batch, ModelSpec, ParamVector, ce_loss, ce_loss_and_grad,
                    forward, init_params, project_key, sgd_step)
from .trainer import (AdaptationState, TrainConfig, adapt_domain,
                      run_sequence, train_source)

__version__ = "0.1.0"
