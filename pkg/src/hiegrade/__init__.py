"""hiegrade: a from-scratch pipeline that grades the severity of
hypoxic-ischemic brain injury from raw multi-channel newborn EEG.

Raw recordings go through bipolar montage derivation, 30 Hz anti-alias
filtering and 4x decimation to 64 Hz; each channel is sliced into
overlapping segments that a small 1D CNN maps to four-grade
probabilities; three aggregation schemes (raw averaging, one-step and
two-step voting) turn the segment probabilities into one grade per
recording. Training, leave-one-subject-out evaluation, a synthetic
corpus generator and a CLI complete the pipeline.
"""

__version__ = "0.1.0"

from .kernels import (
    BatchNormState,
    ConvFilterBank,
    GradCheckReport,
    gradient_check,
)
from .model import (
    ModelParams,
    ModelSpec,
    build_network,
    count_parameters,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .signals import (
    EegRecording,
    FilterDesign,
    derive_bipolar_montage,
    design_antialias_filter,
    downsample,
    load_recording,
    preprocess_recording,
    save_recording,
)
from .grading import (
    GradeDecision,
    SegmentProbabilities,
    grade_recording,
    group_ten_minute,
    infer_segments,
    segment_recording,
    vote_one_step,
    vote_raw_average,
    vote_two_step,
)
from .training import TrainConfig, TrainingCurve, lr_at, sgd_nesterov_step, train
from .evaluation import (
    ConfusionMatrix,
    LosoReport,
    compare_postprocessing,
    loso_evaluate,
    segment_length_sweep,
)
from .synth import CorpusSpec, DEFAULT_ARCHETYPES, GradeArchetype, generate_corpus, generate_subject

__all__ = [name for name in dir() if not name.startswith("_")]
