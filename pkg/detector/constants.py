"""
Constants for error codes and default configuration values.

Error taxonomy:
- E100: FormatError - Malformed documents, feature files or configs
- E200: NumericError - Domain errors in the numeric primitives
- E300: TrainingError - Non-finite losses or failed gradient checks
- E400: EndpointError - Caption endpoint failures
- E500: BundleError - Missing, corrupted or inconsistent model bundles
- E900: InternalError - Anything else
"""


class ErrorCode:
    """Error codes reported by the command line."""

    OK = "OK"

    # E100: FormatError
    FORMAT_ERROR = "E100"
    VALIDATION = "E100"  # MFSC validation report not empty
    FEATURE_FILE = "E100"  # FGADFEAT / FGADSMAP header problems

    # E200: NumericError
    NUMERIC_ERROR = "E200"
    DEGENERATE_FOREGROUND = "E200"  # Stage 1 put no token in the foreground

    # E300: TrainingError
    TRAINING_ERROR = "E300"
    GRAD_CHECK = "E300"  # Relative error above tolerance

    # E400: EndpointError
    ENDPOINT_ERROR = "E400"
    CAPTION_SCHEMA = "E400"  # Model kept answering with invalid documents

    # E500: BundleError
    BUNDLE_ERROR = "E500"
    CONFIG_ERROR = "E500"

    # E900: InternalError
    INTERNAL_ERROR = "E900"


# Hyperparameters
DEFAULT_EPSILON = 1.0
DEFAULT_LAMBDA_REG = 1.0
DEFAULT_N_AB = 4
DEFAULT_GAMMA = 1.5
DEFAULT_LEARNING_RATE = 2e-3
DEFAULT_LOGIT_SCALE = 100.0

# Geometry
NATIVE_GRID = 15  # 240x240 input with 16-pixel patches
HIGHRES_FACTOR = 4
FEATURE_DIM = 512
TOKEN_EMBEDDING_DIM = 768

DEFAULT_ANOMALY_WORDS = ["damaged", "broken", "with defect", "with flaw", "abnormal"]

NEGATION_PREFIX = "without"
PLACEHOLDER_INIT_STD = 0.02
QUERY_INIT_STD = 0.02

MFSC_VERSION = 1
GRAD_CHECK_TOLERANCE = 1e-4
FD_STEP = 1e-5
