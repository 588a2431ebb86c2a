"""Scene-flow refinement for point-cloud frame pairs.

The library turns a rough per-point flow estimate into a smoother, locally
rigid one: partition the cloud into compact regions, pull each point toward
the rigid motion its region agrees on and toward its neighbors' flows, and
balance both against the original estimate. A forward-only matching-cost
embedding and a synthetic benchmark round out the toolkit; the `flowrefine`
command exposes every stage over PLY/.sfl files.
"""

from .crf import (CrfConfig, CrfProblem, KernelSpec, MeanFieldState, RefineResult,
                  build_observations, highorder_energy, init_state, mean_field_step,
                  naive_region_flow, pairwise_energy, pairwise_kernel,
                  pairwise_neighbors, prepare_problem, refine, total_energy,
                  unary_energy)
from .embedding import (EmbeddingConfig, Mlp, MlpLayer, aggregation_weights,
                        baseline_initial_flow, cost_difference, cross_frame_neighbors,
                        flow_embedding, identity_mlp, load_weights, matching_cost,
                        mlp_from_dims, position_encoding, pseudo_cost, save_weights)
from .errors import ConfigError, InputFileError, NumericalError
from .geometry import (NormalField, PointCloud, RigidTransform, as_flow,
                       estimate_normals, knn_search, warp)
from .io import (load_labels, load_ply, load_sfl, save_labels, save_ply, save_sfl)
from .metrics import CameraIntrinsics, MetricsReport, compute_metrics
from .pipeline import (PipelineConfig, RunReport, metrics_to_report_text,
                       parse_config, parse_report, run_pipeline, write_report)
from .rigidfit import (alignment_mse, centroids, cross_covariance, kabsch_fit,
                       rigid_flow_at)
from .supervoxel import SegmenterConfig, SupervoxelPartition, segment
from .synth import (SyntheticScene, SyntheticSceneSpec, generate_scene, perturb_flow,
                    sensitivity_sweep)

__version__ = "0.1.0"
