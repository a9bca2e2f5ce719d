"""Exception hierarchy shared by every kwsforge module."""


class KwsError(Exception):
    """Base class for all kwsforge errors."""


class EmptyInput(KwsError):
    pass


class UnsupportedRate(KwsError):
    pass


class InvalidAlignment(KwsError):
    pass


class ZeroNoise(KwsError):
    pass


class ZeroSignal(KwsError):
    pass


class DegenerateRir(KwsError):
    pass


class PolicyUnsatisfiable(KwsError):
    pass


class ShapeError(KwsError):
    pass


class StateError(KwsError):
    pass


class CheckpointError(KwsError):
    pass


class LabelError(KwsError):
    pass


class MissingEndLabel(KwsError):
    pass


class EmptyQuery(KwsError):
    pass


class EmptyPrompt(KwsError):
    pass


class PoolExhausted(KwsError):
    def __init__(self, pool, requested, available):
        super().__init__(f"pool {pool!r} has {available} entries, {requested} requested")
        self.pool = pool
        self.requested = requested
        self.available = available


class StratificationError(KwsError):
    pass


class ManifestImbalance(KwsError):
    pass


class DivergenceError(KwsError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class InsufficientNegatives(KwsError):
    pass


class InsufficientPositives(KwsError):
    pass


class EmptyResults(KwsError):
    pass
