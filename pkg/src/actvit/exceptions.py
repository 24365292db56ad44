class ActVitError(Exception):
    pass


class InvalidActivationError(ActVitError, ValueError):
    """An activation tensor violates a shape, registry or finiteness invariant."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class UnregisteredLLMError(ActVitError, KeyError):
    def __init__(self, llm_id: str):
        super().__init__(llm_id)
        self.llm_id = llm_id

    def __str__(self):
        return f"LLM {self.llm_id!r} is not registered"


class ProtocolViolation(ActVitError):
    """Evaluation data leaked into (or was requested from) a training corpus."""


class ArchiveError(ActVitError, ValueError):
    """Malformed, truncated or incompatible archive file."""


class NumericFailure(ActVitError, FloatingPointError):
    """Training diverged (non-finite loss)."""


class ConfigError(ActVitError, ValueError):
    pass
