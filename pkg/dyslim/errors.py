# dyslim/errors.py
"""
Exception hierarchy shared by the dyslim package.

Library code raises these; the command-line scripts catch them at the edge
and turn them into messages and exit codes.
"""

from typing import Optional


class DyslimError(Exception):
    """Base class for every error raised by the dyslim package."""


class ContractError(DyslimError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(DyslimError):
    """Operand shapes do not fit the op they are fed to."""

    def __init__(self, message: str, node_id: Optional[int] = None, op_kind: Optional[str] = None):
        self.node_id = node_id
        self.op_kind = op_kind
        self.message = message
        where = f" (node {node_id}, op {op_kind})" if node_id is not None else ""
        super().__init__(f"{message}{where}")

    def __reduce__(self):
        return type(self), (self.message, self.node_id, self.op_kind)


class NonFiniteError(DyslimError):
    """A NaN or infinity showed up in a forward or backward value."""

    def __init__(self, message: str, node_id: Optional[int] = None,
                 op_kind: Optional[str] = None, step: Optional[int] = None):
        self.message = message
        self.node_id = node_id
        self.op_kind = op_kind
        self.step = step
        parts = []
        if node_id is not None:
            parts.append(f"node {node_id}, op {op_kind}")
        if step is not None:
            parts.append(f"rollout step {step}")
        where = f" ({'; '.join(parts)})" if parts else ""
        super().__init__(f"{message}{where}")

    def __reduce__(self):
        return type(self), (self.message, self.node_id, self.op_kind, self.step)


class ConfigError(DyslimError):
    """A configuration document is invalid. Carries the file path and line when known."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{prefix}{message}")

    def __reduce__(self):
        return type(self), (self.message, self.path, self.line)


class FormatError(DyslimError):
    """A DYSL container could not be parsed."""


class UnsupportedVersionError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class GenerationError(DyslimError):
    """A ground-truth trajectory blew up while it was being generated."""

    def __init__(self, message: str, trajectory_index: int):
        self.message = message
        self.trajectory_index = trajectory_index
        super().__init__(f"{message} (trajectory {trajectory_index})")

    def __reduce__(self):
        return type(self), (self.message, self.trajectory_index)


class UndefinedMetricError(DyslimError):
    """A metric has no defined value for the given inputs."""
