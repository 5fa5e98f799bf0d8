"""Exception types raised across the package."""


class SemRobustError(Exception):
    """Base class for all package-specific errors."""


# --- dataset files ---------------------------------------------------------

class BadMagic(SemRobustError):
    """File does not begin with a supported IDX magic number."""


class TruncatedFile(SemRobustError):
    """IDX file is shorter than its header promises."""


class NTooLarge(SemRobustError):
    """Requested subsample size exceeds the dataset size."""


class ChecksumMismatch(SemRobustError):
    """A dataset file does not match its recorded SHA-256 digest."""


# --- differentiable core ---------------------------------------------------

class NonFiniteLoss(SemRobustError):
    """Loss evaluated to NaN or infinity."""


class ShapeMismatch(SemRobustError):
    """Gradient shapes do not match parameter shapes."""


class DivergedTraining(SemRobustError):
    """Training loss became non-finite."""


# --- models ----------------------------------------------------------------

class DegenerateDenominator(SemRobustError):
    """Every probe left the concept vector unchanged, so the
    sensitivity ratio is undefined."""


class IndexOutOfRange(SemRobustError, IndexError):
    """Prototype index outside [0, n_prototypes)."""


class NoPrototypeForLabel(SemRobustError):
    """No prototype carries the requested label."""


class AllPrototypesSameLabel(SemRobustError):
    """Every prototype carries the same label, so distances to other
    labels are undefined."""


# --- attack ----------------------------------------------------------------

class InsufficientTargets(SemRobustError):
    """Fewer differently-labeled candidates than requested targets."""


class FeasibilityViolation(SemRobustError):
    """An emitted adversarial image left the allowed perturbation box."""


# --- metrics ---------------------------------------------------------------

class NoPeer(SemRobustError):
    """No other example with the required label relation exists."""


class NoPreservedRecord(SemRobustError):
    """No attack record kept the natural prediction."""


class EmptyInput(SemRobustError):
    """Statistic requested over an empty value list."""


# --- cli / persistence -----------------------------------------------------

class ConfigError(SemRobustError):
    """Malformed or unknown configuration."""


class KindMismatch(SemRobustError):
    """Checkpoint model kind does not match the requested operation."""


class MissingArtifact(SemRobustError):
    """A required input file from an earlier stage is missing."""
