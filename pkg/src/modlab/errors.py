"""Exception types shared across modlab."""


class ModlabError(Exception):
    """Base class for all modlab errors."""


class ShapeError(ModlabError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(ModlabError, ArithmeticError):
    """A computation produced or met non-finite values, or failed to converge."""


class InputError(ModlabError, ValueError):
    """Caller supplied invalid data or parameters."""


class StateError(ModlabError, RuntimeError):
    """An object is not in the state an operation requires."""


class SpecError(InputError):
    """A task definition cannot be realized (e.g. sequence budget exceeded)."""


class ArtifactError(ModlabError, RuntimeError):
    """An artifact on disk is missing, corrupt, or does not match its peers."""
