"""GPS-assisted video annotation: propose candidate objects from sparse
flow tracks, match the GPS-carrying target with an HMM, refine the box
sequence, and rank annotation quality."""

from .geometry import (BoundingBox, DegenerateCorrespondence, FramePoint,
                       Homography, PointAtInfinity, WorldPoint,
                       fit_homography, frame_to_world, frame_to_world_array,
                       iou, load_calibration, normalized_distance,
                       shape_distance, world_to_frame, world_to_frame_array)
from .proposal import (AffinityTable, CandidateObject, CofTrack, FlowTrack,
                       ProposalConfig, compute_moving_flags, dbscan,
                       dbscan_ac, extend_stationary, link_cofs,
                       propose_candidates, suppress_twin_tracks)
from .matching import (AllPathsImpossible, EmptyClip, GpsTrace, HmmLattice,
                       HmmParams, MatchResult, PreparedClip, SearchSpace,
                       build_lattice, build_skeleton, nearest_box_baseline,
                       search_hyperparams, viterbi)
from .tensor_core import Diverged, ParamStore, ShapeMismatch, optimizer_step
from .refine import (BoxSequence, RefinerConfig, RefinerModel,
                     corrupt_sequence, outlier_filter_once,
                     sequences_from_boxes, smooth_sequence, train_refiner)
from .ranking import (RankedAnnotation, RankerConfig, RankerModel, high_pass,
                      keep_top, purification_curve, rank,
                      read_annotations_jsonl, score_quality, train_ranker,
                      write_annotations_jsonl)
from .simulator import (Clip, FlowNoiseSpec, GpsNoiseSpec, HomographySpec,
                        InvalidSpec, ObjectSpec, ScenarioSpec,
                        generate_scenario, read_clip, read_ground_truth,
                        simulate_gps, write_clip, write_ground_truth)
from .evaluation import (AblationConfig, ClipMetrics, NoOverlapFrames,
                         SuiteSpec, TooFewClips, ablation_configs,
                         annotate_clip, clip_metrics, run_ablation,
                         run_benchmark, stage1, three_fold_split,
                         write_report_files)

__all__ = [n for n in dir() if not n.startswith("_")]
__version__ = "0.1.0"
