"""Exception hierarchy. Validation errors exit the CLI with code 1, transport
and other runtime errors with code 2."""


class PosbenchError(Exception):
    pass


class ValidationError(PosbenchError):
    """Bad inputs: malformed files, contract violations, infeasible configs."""


class CorpusError(ValidationError):
    pass


class PassageNotFoundError(CorpusError):
    """Passage text has no exact character-level occurrence in the document."""


class ConfigError(ValidationError):
    pass


class TransportError(PosbenchError):
    """Remote backend unreachable or returned a malformed reply."""

    def __init__(self, message, endpoint=None, batch_index=None):
        super().__init__(message)
        self.endpoint = endpoint
        self.batch_index = batch_index


class ProbeError(PosbenchError):
    """A probe run could not complete; carries whatever partial results exist."""

    def __init__(self, message, failed_windows=None, partial_report=None):
        super().__init__(message)
        self.failed_windows = failed_windows or []
        self.partial_report = partial_report
