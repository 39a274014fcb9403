"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Input tensor shape does not match what a layer or loss expects."""


class ConfigurationError(ValueError):
    """Invalid configuration (unknown layer kind, bad hyper-parameters, ...)."""


class StateError(RuntimeError):
    """Operation invoked in the wrong state (e.g. backward without a forward)."""


class CompatibilityError(ValueError):
    """Checkpoint and dataset (or two artifacts) disagree on shapes or sizes."""


class DegenerateFoldError(ContractError):
    """A fold split would leave the training set empty."""


class UndefinedConditionalError(ValueError):
    """Conditioning on an event of probability zero."""


class FormatError(ValueError):
    """A persisted file is malformed or has an unsupported format version."""
