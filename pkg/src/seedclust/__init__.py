"""Proposal-free instance segmentation: per-pixel spatial embeddings with
a jointly learned clustering bandwidth, seed maps for center sampling,
and sequential seed-driven clustering at inference."""

from .clustering import (ClusterConfig, ClusterInstance, ClusterResult,
                         cluster, cluster_fields, cluster_with_oracle_centers,
                         fixed_margin_assign, flatten_instances,
                         load_cluster_result, nearest_centroid_assign,
                         save_cluster_result)
from .evaluation import (EvalReport, MarginSizeReport, MatchSpec, ap_gt,
                         average_precision, instance_extent,
                         margin_size_correlation)
from .fields import load_pixel_fields, save_pixel_fields
from .geometry import (GridShape, build_coordinate_map, embed, gaussian_phi,
                       margin_of, margin_to_sigma, sigma_from_raw, sigma_to_raw)
from .labels import InstanceLabelMap, relabel_contiguous
from .losses import (LossConfig, LossReport, hinge_baseline_loss,
                     instance_mask_loss, regression_baseline_loss, seed_loss,
                     smoothness_loss, total_loss)
from .lovasz import lovasz_hinge, phi_to_score
from .model import (ModelConfig, ModelOutput, Network, activate_heads,
                    load_checkpoint, save_checkpoint)
from .synthdata import (InstanceScene, SceneSpec, dataset_manifest, generate,
                        load_manifest, load_scene, save_scene,
                        scenes_from_manifest, write_manifest)
from .trainer import (AblationReport, GradCheckReport, TrainConfig,
                      TrainResult, grad_check, poly_lr, run_ablation, train)

__version__ = "0.1.0"
