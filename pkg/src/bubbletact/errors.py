"""Exception types shared across the bubbletact modules."""


class PressureBandError(ValueError):
    """Commanded or configured pressure outside the safe operating band."""


class ContractError(ValueError):
    """Caller violated an operation precondition (dimensions, ranges, ...)."""


class StaleReferenceError(RuntimeError):
    """Reference frames were captured at a pressure too far from the current one."""


class ResetRejected(RuntimeError):
    """Reference reset requested while the pressure loop is not settled; retry."""


class CalibrationError(ValueError):
    """Gain calibration cannot proceed (rank-deficient or too few scenarios)."""


class ConfigError(ValueError):
    """Malformed configuration (offset table, plant profile, scenario file)."""


class FormatError(ValueError):
    """Corrupt or truncated binary frame file; message names the byte offset."""


class RunError(RuntimeError):
    """A scenario step violated the run contract; message names the step."""
