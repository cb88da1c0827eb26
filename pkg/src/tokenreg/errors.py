"""Exception hierarchy. Every error raised on purpose by tokenreg derives from TokenRegError."""

from typing import Any, List, Optional


class TokenRegError(Exception):
    pass


class GraphError(TokenRegError):
    """Problem with a computation graph. `node` is the offending node label when known."""

    def __init__(self, message: str, node: Optional[str] = None):
        self.node = node
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class GraphUsageError(GraphError):
    pass


class VocabularyError(TokenRegError):
    pass


class DeskScaleError(TokenRegError):
    pass


class EnvironmentSpecError(TokenRegError):
    pass


class RolloutError(TokenRegError):
    pass


class ConfigError(TokenRegError):
    """Bad configuration. Carries the key and, for file input, the line number."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)


class StepAbortedError(TokenRegError):
    """A training step produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int, batches: List[Any],
                 dump_path: Optional[str] = None):
        self.step = step
        self.batches = batches
        self.dump_path = dump_path
        super().__init__(f"step {step}: {message}")
