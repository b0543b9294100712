"""Exception hierarchy.

Each error carries an ``exit_code`` so the CLI can map failures onto
usage (2), data (3) and compute (4) exits without a lookup table.
"""


class AgeDiffError(Exception):
    exit_code = 4


class UsageError(AgeDiffError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class InputError(AgeDiffError):
    exit_code = 3


class ShapeError(InputError):
    pass


class RangeError(InputError):
    pass


class DirectionError(InputError):
    pass


class VocabularyError(InputError):
    pass


class AlignmentError(InputError):
    pass


class PairingError(InputError):
    pass


class ConsistencyError(InputError):
    pass


class AdapterError(InputError):
    pass


class ProbeUnderflowError(AgeDiffError):
    pass


class SingularityError(AgeDiffError):
    pass


class TrainingError(AgeDiffError):
    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class OptimizationError(AgeDiffError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
