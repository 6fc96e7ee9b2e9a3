"""damot: domain-adaptive multi-object tracking toolkit.

Submodules:
  core      data model (boxes, detections, tracks, sequences) and geometry
  mot_io    MOT-format parsing/serialization, split manifests, run configs
  assoc     Kalman/Hungarian SORT tracker and EMD linking baseline
  metrics   CLEAR-MOT, IDF1, HOTA with cross-sequence pooling
  autodiff  reverse-mode tensor autodiff, layers, AdamW, checkpoints
  kernels   conv2d hot kernels (compiled extension + numpy fallback)
  danet     discriminators, toy tracker, adversarial losses
  synth     synthetic two-domain sequence generator
  train     adversarial training loop, diagnostics, toy evaluation
  cli       command-line interface
"""

from .core import (
    AnnotatedSequence, BoundingBox, DegenerateBoxError, Detection,
    SequenceStats, Track, centroid_distance, iou, sequence_stats,
)
from .mot_io import (
    ConfigError, IntegrityError, ManifestError, ParseError, RunConfig,
    SortConfig, TrainerConfig, load_config, load_split_manifest,
    parse_detections, parse_mot_file, write_mot_file,
)
from .assoc import (
    SortTracker, emd_link, hungarian, kalman_init, kalman_predict,
    kalman_update, pseudo_gt, run_emd, run_sort,
)
from .metrics import (
    MetricsReport, clear_mot, evaluate_sequence, hota, idf1, pool_combined,
    report_to_csv, report_to_json,
)
from .autodiff import (
    AdamW, Module, Tensor, grad_check, grl, load_checkpoint, save_checkpoint,
)
from .danet import (
    GlobalDiscriminator, LocalDiscriminator, ToyTracker, ToyTrackerConfig,
    TrackDiscriminator, global_loss, local_loss, total_loss, toy_mot_loss,
    track_loss,
)
from .synth import SOURCE_SPEC, TARGET_SPEC, DomainSpec, gen_synthetic_sequence
from .train import (
    DaModel, TrainHistory, alignment_diagnostics, default_schedule,
    evaluate_toy, run_toy_tracker, train,
)

__version__ = "0.1.0"
