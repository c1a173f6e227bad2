class LeaderlessError(Exception):
    pass


class ConflictingCommit(LeaderlessError):
    """A command received two decisions that cannot be reconciled."""


class NotStable(LeaderlessError):
    pass


class PreconditionViolated(LeaderlessError):
    pass


class InsufficientQuorum(LeaderlessError):
    pass


class Stalled(LeaderlessError):
    pass


class ConfigInvalid(LeaderlessError):
    pass


class SchedulerDeadlock(LeaderlessError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class NotRollOptimal(LeaderlessError):
    pass


class PlanViolation(LeaderlessError):
    pass


class BoundsExceeded(LeaderlessError):
    pass
