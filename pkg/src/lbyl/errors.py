"""Exception hierarchy.

Every error raised by the package derives from :class:`LBYLError` and carries
an ``exit_code`` the CLI maps to its process status.
"""


class LBYLError(Exception):
    exit_code = 2


class ConfigError(LBYLError):
    exit_code = 2


class ShapeMismatch(LBYLError, ValueError):
    exit_code = 2


class GeometryError(ShapeMismatch):
    pass


class InvalidBN(LBYLError, ValueError):
    pass


class UnknownArch(ConfigError, ValueError):
    pass


class NumericalError(LBYLError, ArithmeticError):
    exit_code = 3


class NotPositiveDefinite(NumericalError):
    pass


class AsymmetricInput(NumericalError):
    pass


class DegenerateTarget(NumericalError):
    """The pruned filter's BN scale makes the BN-aware basis ill-defined."""


class ContainerError(LBYLError):
    exit_code = 4


class BadMagic(ContainerError):
    pass


class UnsupportedVersion(ContainerError):
    pass


class ChecksumMismatch(ContainerError):
    pass


class TruncatedStream(ContainerError):
    pass


class DegenerateLayer(LBYLError, ValueError):
    pass


class AllPruned(LBYLError, ValueError):
    pass


class PlanShapeMismatch(LBYLError, ValueError):
    pass


class IllegalResidualPrune(PlanShapeMismatch):
    pass


class MissingTap(LBYLError, KeyError):
    pass


class EmptyDelivery(LBYLError, ValueError):
    pass
