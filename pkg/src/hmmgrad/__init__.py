"""HMM forward-gradient skill identification and anomaly detection."""

__version__ = "0.1.0"

from .detection import (
    DetectorConfig,
    EventTimeline,
    GradientCalibration,
    MagnitudeThreshold,
    OnlineDetector,
    calibrate_gradient,
    calibrate_magnitude,
    forward_gradient,
    gradient_anomaly_test,
    gradient_series,
    identify_skill,
    run_detector,
    score_skill_cumulative,
)
from .hmm import (
    HmmModel,
    LogBelief,
    TrainConfig,
    ViterbiResult,
    forward_init,
    forward_step,
    loglik_series,
    logsumexp,
    select_num_states,
    train_baum_welch,
    viterbi,
)
from .kernels import BACKEND
from .synthesis import AnomalyType, TaskSpec, Trial, default_task_spec

__all__ = [
    "AnomalyType", "BACKEND", "DetectorConfig", "EventTimeline", "GradientCalibration", "HmmModel", "LogBelief",
    "MagnitudeThreshold", "OnlineDetector", "TaskSpec", "TrainConfig", "Trial", "ViterbiResult",
    "calibrate_gradient", "calibrate_magnitude", "default_task_spec", "forward_gradient", "forward_init",
    "forward_step", "gradient_anomaly_test", "gradient_series", "identify_skill", "loglik_series", "logsumexp",
    "run_detector", "score_skill_cumulative", "select_num_states", "train_baum_welch", "viterbi",
]
