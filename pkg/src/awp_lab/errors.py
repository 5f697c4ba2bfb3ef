"""Exception hierarchy shared by every module."""


class AWPLabError(Exception):
    """Base class for all errors raised by awp_lab."""


class ShapeError(AWPLabError, ValueError):
    pass


class NonFiniteError(AWPLabError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class LabelError(AWPLabError, ValueError):
    pass


class FormatError(AWPLabError, ValueError):
    """Malformed IDX, CSV or checkpoint input."""


class ConfigError(AWPLabError, ValueError):
    pass
