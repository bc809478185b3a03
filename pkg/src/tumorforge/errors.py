"""Exception hierarchy shared across the package.

Three base categories map onto the CLI exit codes: usage errors (2),
data errors (3), and training/numeric errors (4).
"""


class TumorForgeError(Exception):
    """Base class for all package errors."""


class UsageError(TumorForgeError):
    """Bad command line or configuration input. Exit code 2."""


class DataError(TumorForgeError):
    """Invalid, corrupt, or insufficient data. Exit code 3."""


class NumericError(TumorForgeError):
    """Failure during training, synthesis, or numeric evaluation. Exit code 4."""


# --- data model / persistence -------------------------------------------------

class DegenerateStd(DataError):
    """Support standard deviation too small to normalize."""


class IOFailure(DataError):
    """A record could not be written or read."""


class CorruptRecord(DataError):
    """Tensor byte length disagrees with the sidecar dimensions."""


class UnknownVersion(DataError):
    """Record or manifest carries an unsupported format version."""


class InvalidGradeValue(DataError):
    """Grade mask contains a value outside {0, 0.5, 0.75, 1.0}."""


# --- geometry -----------------------------------------------------------------

class EmptyMask(DataError):
    """Operation requires at least one nonzero mask pixel."""


class DimensionMismatch(DataError):
    """Image and mask dimensions disagree."""


# --- losses -------------------------------------------------------------------

class ShapeMismatch(DataError):
    """Loss operands have different shapes."""


class OutOfRange(NumericError):
    """Discriminator scores fell outside [0, 1]."""


# --- training -----------------------------------------------------------------

class EmptyDataset(DataError):
    """No usable training records (e.g. no tumor-bearing slices)."""


class NoCheckpoints(NumericError):
    """Best-model selection was given an empty checkpoint list."""


# --- synthesis ----------------------------------------------------------------

class UntrainedModel(NumericError):
    """Synthesis requires a complete, trained model bundle."""


class RejectionBudgetExceeded(NumericError):
    """A sample exhausted its rejection attempts without acceptance."""


# --- evaluation ---------------------------------------------------------------

class TooFewSamples(DataError):
    """Feature set smaller than its dimension with shrinkage disabled."""


class SplitOverlap(DataError):
    """Test split shares record ids with a training split."""


class BackboneUnavailable(DataError):
    """Pretrained feature backbone weights could not be loaded."""


# --- CLI ----------------------------------------------------------------------

class UnknownCommand(UsageError):
    """Command name not recognized."""


class UnknownOption(UsageError):
    """Option name not recognized for the command."""


class MissingRequired(UsageError):
    """A required option was not supplied."""
