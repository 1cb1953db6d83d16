"""Model extraction against a blackbox classifier, at desk scale.

A victim MLP is trained on synthetic data and exposed as a metered
blackbox; an adversary builds a transfer set by random or adaptive
(hierarchical gradient-bandit) querying and trains a knockoff on the
blackbox's soft outputs.
"""

from .attack import AttackConfig, OfflineConfig, TransferSet, construct_adaptive, construct_random, run_attack, train_knockoff_offline
from .datapool import DatasetSpec, OverlapConfig, SamplePool, agglomerative_cluster, build_hierarchy, build_universe, gen_synthetic, label_overlap, semi_open_filter
from .numerics import Mlp, SgdMomentum, backward, forward, soft_ce_loss, softmax
from .policy import PolicyTree, RewardConfig, RewardState, aggregate_reward, sample_action, update_policy
from .victim import DefensePolicy, VictimBlackbox, class_weights, train_victim, truncate

__version__ = "0.1.0"
