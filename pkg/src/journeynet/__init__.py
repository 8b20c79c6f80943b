"""Customer online journey modelling and conversion estimation.

The package models a visit as searched keywords followed by a page sequence
ending in a synthetic NULL page.  A character-level CNN embeds phrases, a
stacked LSTM predicts the next page at every step, and Monte Carlo rollouts
of the trained model estimate per-visitor conversion probabilities.
"""

__version__ = "0.1.0"

from .errors import (
    CapacityError,
    CliError,
    JourneynetError,
    MarkovSpecError,
    NumericError,
    ParseError,
    SchemaError,
    ShapeError,
    TrainingError,
)
from .journeydata import (
    NULL_PAGE,
    UNKNOWN_PAGE,
    MarkovSpec,
    PageEvent,
    PageVocabulary,
    Session,
    build_vocab,
    expand_session,
    generate_synthetic,
    load_sessions,
    parse_log,
    replicate_dwell,
    save_sessions,
    split,
)
from .numerics import ComputeTape, Matrix, backward, grad_check
from .seqmodel import (
    ModelConfig,
    SequenceModel,
    StepPrediction,
    load_model,
    predict_next,
    save_model,
    session_loss,
)
from .simulator import (
    ConversionEstimate,
    JourneyPrefix,
    Objective,
    SimulatedJourney,
    estimate_conversion,
    exact_conversion,
    rollout,
    score_batch,
    step_distribution,
    write_scores_csv,
)
from .textenc import Alphabet, CnnEncoder, quantize
from .training import (
    Ensemble,
    TrainConfig,
    TrainReport,
    ensemble_predict,
    evaluate,
    load_ensemble,
    load_predictor,
    save_ensemble,
    train,
    train_ensemble,
)

__all__ = [
    "Alphabet",
    "CapacityError",
    "CliError",
    "CnnEncoder",
    "ComputeTape",
    "ConversionEstimate",
    "Ensemble",
    "JourneynetError",
    "JourneyPrefix",
    "MarkovSpec",
    "MarkovSpecError",
    "Matrix",
    "ModelConfig",
    "NULL_PAGE",
    "NumericError",
    "Objective",
    "PageEvent",
    "PageVocabulary",
    "ParseError",
    "SchemaError",
    "SequenceModel",
    "Session",
    "ShapeError",
    "SimulatedJourney",
    "StepPrediction",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "UNKNOWN_PAGE",
    "__version__",
    "backward",
    "build_vocab",
    "ensemble_predict",
    "estimate_conversion",
    "evaluate",
    "exact_conversion",
    "expand_session",
    "generate_synthetic",
    "grad_check",
    "load_ensemble",
    "load_model",
    "load_predictor",
    "load_sessions",
    "parse_log",
    "predict_next",
    "quantize",
    "replicate_dwell",
    "rollout",
    "save_ensemble",
    "save_model",
    "save_sessions",
    "score_batch",
    "session_loss",
    "split",
    "step_distribution",
    "train",
    "train_ensemble",
    "write_scores_csv",
]
