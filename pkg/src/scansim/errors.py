"""Exception hierarchy shared across the package."""


class ScansimError(Exception):
    """Base class for all domain errors."""


# --- volume I/O ---

class MalformedHeader(ScansimError):
    pass


class UnsupportedVersion(ScansimError):
    pass


class NoMask(ScansimError):
    pass


# --- demonstrations / datasets ---

class UnorderedWaypoints(ScansimError):
    pass


class DemoTooShort(ScansimError):
    pass


class InsufficientStages(ScansimError):
    pass


# --- embedder ---

class ShapeMismatch(ScansimError):
    pass


class EmptyDataset(ScansimError):
    pass


class DivergedLoss(ScansimError):
    pass


# --- retrieval store ---

class DuplicateId(ScansimError):
    pass


class ZeroEmbedding(ScansimError):
    pass


class EmptyStore(ScansimError):
    pass


class ZeroQuery(ScansimError):
    pass


# --- policy / wire protocol ---

class ContextCountMismatch(ScansimError):
    pass


class MissingField(ScansimError):
    pass


class UnknownStage(ScansimError):
    pass


class UnknownApi(ScansimError):
    pass


class BackendUnavailable(ScansimError):
    pass


class ProtocolError(ScansimError):
    pass


# --- evaluation ---

class UncoveredSpan(ScansimError):
    pass
