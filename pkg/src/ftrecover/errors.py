"""Exception hierarchy shared by every module."""


class FaultToleranceError(Exception):
    """Base class for all errors raised by ftrecover."""


class InvalidShape(FaultToleranceError):
    pass


class ShapeMismatch(FaultToleranceError):
    pass


class EmptyInput(FaultToleranceError):
    pass


class NumericalError(FaultToleranceError):
    pass


class NotInvertible(FaultToleranceError):
    """The optimizer has no inverse update (e.g. AMSGrad's element-wise max)."""


class NonInvertibleHyper(FaultToleranceError):
    """The hyper-parameters make the inverse update singular."""


class NothingToUndo(FaultToleranceError):
    pass


class MissingActivation(FaultToleranceError):
    pass


class ChannelBroken(FaultToleranceError):
    """A point-to-point channel touches a dead machine."""

    def __init__(self, message, dead_machines=()):
        super().__init__(message)
        self.dead_machines = tuple(dead_machines)


class InvalidInjection(FaultToleranceError):
    pass


class NotFailed(FaultToleranceError):
    pass


class InvalidConfig(FaultToleranceError):
    pass


class StorageError(FaultToleranceError):
    pass


class MissingLogData(FaultToleranceError):
    pass


class CorruptLog(FaultToleranceError):
    pass


class NoCheckpoint(FaultToleranceError):
    pass


class NoReplica(FaultToleranceError):
    pass


class TooLarge(FaultToleranceError):
    pass


class Unrecoverable(FaultToleranceError):
    """No recovery path exists for the failure scenario."""
