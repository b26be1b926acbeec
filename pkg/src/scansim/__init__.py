"""scansim: closed-loop carotid ultrasound scanning simulator with a
retrieval-augmented decision harness."""

from .volume import (ProbePose, SliceImage, SliceSpec, UsVolume, apply_motion,
                     load_volume, mask_centroid_in_plane, sample_slice,
                     transform_pose, write_volume)
from .workflow import (DONE, ApiCommand, MotionDelta, MotionParams, ScanStage,
                       api_to_motion, next_stage_candidates, stage_explanation)
from .demo import (Demonstration, TripletSpec, Waypoint, WindowEntry,
                   build_trajectory, execute_trajectory, refine_waypoints,
                   sample_triplets, window_dataset)
from .embedder import (ProjectorParams, ResMlpParams, TrainConfig,
                       assemble_input, projector_forward, resmlp_forward,
                       stage_embedding, surrogate_encode, train_resmlp,
                       triplet_loss)
from .retrieval import ContextRecord, ContextStore, RetrievalResult, topk_accuracy
from .policy import (BackendConfig, PolicyDecision, PromptBundle,
                     assemble_prompt, parse_decision, rag_only_policy,
                     remote_vlm_policy, render_decision)
from .loop import (ContextEmbedder, LoopParams, OracleBackend, RagOnlyBackend,
                   RunLog, eval_stage_accuracy, run_closed_loop)
from .phantom import (carotid_phantom, gradient_volume, phantom_ground_truth,
                      phantom_waypoints)

__version__ = "0.1.0"
