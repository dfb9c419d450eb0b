"""Exception types shared across the simulator and compiler.

Faults that model machine-visible error conditions (races, deadlocks, unit
faults) derive from SimFault; configuration/shape/usage problems derive from
SimError directly.  The CLI maps SimError subclasses to exit codes.
"""


class SimError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigInvalid(SimError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IndexOutOfRange(SimError):
    pass


class OutOfRange(SimError):
    pass


class InvalidLevel(SimError):
    pass


class Exhausted(SimError):
    pass


class QueueFull(SimError):
    pass


class OverflowFault(SimError):
    pass


class UnroutableTarget(SimError):
    pass


class MalformedRequest(SimError):
    pass


class UnsupportedDtype(SimError):
    pass


class TileTooLarge(SimError):
    pass


class InvalidPipeline(SimError):
    pass


class NonfiniteFault(SimError):
    pass


class OverlapFault(SimError):
    pass


class UnknownRoutine(SimError):
    pass


class BadDescriptor(SimError):
    pass


class ParseError(SimError):
    pass


class ShapeMismatch(SimError):
    pass


class UnsupportedOp(SimError):
    pass


class DoesNotFit(SimError):
    pass


class TooFewTpbs(SimError):
    pass


class OutOfCounters(SimError):
    pass


class SimFault(SimError):
    """Runtime fault raised while the machine is stepping."""


class RaceDetected(SimFault):
    pass


class DeadlockDetected(SimFault):
    pass


class WatchdogExpired(SimFault):
    pass
