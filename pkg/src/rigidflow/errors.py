"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code.
"""


class RigidFlowError(Exception):
    category = "numerical"


class UsageError(RigidFlowError):
    category = "usage"


class ParameterError(UsageError, ValueError):
    pass


class FormatError(RigidFlowError):
    category = "format"


class ParseError(FormatError):
    pass


class IntegrityError(FormatError):
    pass


class DimensionError(RigidFlowError, ValueError):
    category = "dimension"


class NumericalError(RigidFlowError):
    category = "numerical"


class InvalidDepthError(NumericalError, ValueError):
    pass


class BehindCameraError(NumericalError, ValueError):
    pass


class BranchError(NumericalError, ValueError):
    pass


class EmptyFitError(NumericalError):
    pass


class UnderConstrainedError(NumericalError):
    pass


class SpecError(UsageError):
    pass
