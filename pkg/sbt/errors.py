"""
Exception hierarchy shared by the library and the CLI.

The CLI maps ConfigError / DataError / DivergenceError to exit codes 2 / 3 / 4.
"""


class SBTError(Exception):
    """Base class for all toolkit errors"""


class ConfigError(SBTError):
    """Invalid model / training / preset configuration"""


class DataError(SBTError):
    """Unreadable or inconsistent dataset"""


class DivergenceError(SBTError):
    """Training produced a non-finite loss"""


class ShapeError(SBTError, ValueError):
    """Operand extents do not agree"""

    def __init__(self, op: str, a_shape: tuple, b_shape: tuple):
        super().__init__(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


class ContainerError(SBTError):
    """Packed model container could not be read or written"""


class ChecksumError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class UnfrozenModuleError(ContainerError):
    pass
