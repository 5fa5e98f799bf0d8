"""Self-explaining classifiers and explanation-robustness measurement.

Two sklearn-style estimators (a concept-based classifier and a
prototype-distance classifier), an L-infinity PGD engine that perturbs
explanations while preserving predictions, and the distance/consistency
metrics that quantify the effect.
"""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackRecord, attack_proto, attack_senn,
                     pgd, run_attack_suite, select_targets)
from .dataio import (Dataset, RawDataset, load_idx, load_raw_dataset,
                     normalize, read_idx, subsample, write_idx)
from .diffcore import adam_init, adam_step, finite_diff_check, grad_wrt_input
from .metrics import (BoxStats, DistanceRecord, adv_out_class_distance,
                      box_stats, consistency_rate, in_class_distance,
                      out_class_distance)
from .protodl import (PrototypeClassifier, assign_proto_labels,
                      interp_loss_Lh, overall_distance_D, rest_distance_R)
from .senn import (ConceptGallery, SennClassifier, aggregate_logits,
                   build_concept_gallery, local_lipschitz, stability_penalty)

__all__ = [
    "AttackConfig", "AttackRecord", "BoxStats", "ConceptGallery", "Dataset",
    "DistanceRecord", "PrototypeClassifier", "RawDataset", "SennClassifier",
    "adam_init", "adam_step", "adv_out_class_distance", "aggregate_logits",
    "assign_proto_labels", "attack_proto", "attack_senn", "box_stats",
    "build_concept_gallery", "consistency_rate", "finite_diff_check",
    "grad_wrt_input", "in_class_distance", "interp_loss_Lh", "load_idx",
    "load_raw_dataset", "local_lipschitz", "normalize", "out_class_distance",
    "overall_distance_D", "pgd", "read_idx", "rest_distance_R",
    "run_attack_suite", "select_targets", "stability_penalty", "subsample",
    "write_idx",
]
