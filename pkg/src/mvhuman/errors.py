"""Exception hierarchy shared by every stage of the pipeline."""


class MVHumanError(Exception):
    """Base class for all package errors."""


class ConfigError(MVHumanError, ValueError):
    """Invalid configuration (schedule ranges, step counts, config files)."""


class ValidationError(MVHumanError, ValueError):
    """Input values outside their documented domain."""


class ShapeError(MVHumanError, ValueError):
    """Tensor or image shapes that do not line up."""


class NumericError(MVHumanError, ArithmeticError):
    """Non-finite values produced during training or sampling."""


class DetectionError(MVHumanError, RuntimeError):
    """A face-detection provider failed (distinct from "no face found")."""


class LookupFailure(MVHumanError, KeyError):
    """Missing view id, memory block or similar keyed entry."""
