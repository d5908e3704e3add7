"""Exception types raised across the package."""


class ModiadError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidInputError(ModiadError, ValueError):
    """An argument violates an operation's precondition (shapes, emptiness, ...)."""


class ConfigError(ModiadError, ValueError):
    """A configuration value is out of range or inconsistent.

    ``key`` names the offending setting as a dotted path when known.
    """

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DivergedTrainingError(ModiadError, RuntimeError):
    def __init__(self, message, *, round=None, step=None, client=None, class_id=None):
        self.round = round
        self.step = step
        self.client = client
        self.class_id = class_id
        ctx = ", ".join(
            f"{name}={val}"
            for name, val in (("round", round), ("client", client), ("class", class_id), ("step", step))
            if val is not None
        )
        super().__init__(f"{message} ({ctx})" if ctx else message)


class DegenerateLabelsError(ModiadError, ValueError):
    """Metric inputs lack one of the two label values (or any anomalous region)."""


class CorruptionError(ModiadError, ValueError):
    """A serialized stream is truncated, has a bad header, or inconsistent dims."""


class InstanceTooLargeError(ModiadError, ValueError):
    """Exhaustive scheduling was asked to enumerate more candidates than allowed."""


class RoundError(ModiadError, RuntimeError):
    """A round aborted; the pre-round state is left untouched.

    Wraps the underlying error and records where it happened.
    """

    def __init__(self, cause, *, round, client=None, class_id=None):
        self.cause = cause
        self.round = round
        self.client = client
        self.class_id = class_id
        where = f"round={round}"
        if client is not None:
            where += f", client={client}"
        if class_id is not None:
            where += f", class={class_id}"
        super().__init__(f"round aborted ({where}): {cause}")
