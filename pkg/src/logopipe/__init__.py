"""Logo recognition pipeline: proposals, a tiny CNN, calibrated decisions."""

from .data import (BoundingBox, Annotation, DatasetIndex, LabeledSample,
                   NormStats, NO_LOGO, iou, label_proposals, crop_resize,
                   augment_shifts, compute_norm_stats, apply_norm,
                   balance_epoch, balance_batch, load_dataset)
from .network import (LogoNet, build_network, forward_batch, backward_batch,
                      extract_features, save_model, load_model,
                      ModelFormatError, ModelVersionError, ModelShapeError)
from .proposals import (ProposalConfig, ProposalGenerator, ProposalSet,
                        segment_graph, group_regions, propose)
from .training import (TrainingConfig, TrainReport, PRESET_NAMES, preset,
                       build_training_set, train, calibrate_threshold)
from .inference import ImageDecision, classify_image, classify_batch, decide
from .evaluation import EvalResult, evaluate, evaluate_model, ablation_table, timing_report
from .dedup import ssim, find_exact_duplicates, find_near_duplicates
from .synth import SynthSpec, generate

__version__ = "0.1.0"
