"""Exception and warning types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Malformed model, cluster, or pipeline input."""


class PassError(Exception):
    """Base class for errors raised while applying an optimization pass.

    ``stage`` is filled in by the pipeline so callers can tell which stage
    failed without parsing the message.
    """

    stage: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        if self.stage:
            return f"[{self.stage}] {msg}"
        return msg


class DependencyViolation(PassError):
    pass


class UnusedParameter(PassError):
    def __init__(self, param: str):
        super().__init__(f"parameter {param!r} is not used by any compute node")
        self.param = param


class AlreadySharded(PassError):
    pass


class ProfileMismatch(PassError):
    def __init__(self, node: int):
        super().__init__(f"memory profile has no entry for node {node}")
        self.node = node


class Infeasible(PassError):
    """The schedule cannot satisfy the memory limit.  ``node`` names the offender."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class InfeasibleBaseline(Infeasible):
    pass


class OffloadInfeasible(Infeasible):
    pass


class InsufficientHostCapacity(Infeasible):
    pass


class MissingStepMarker(PassError):
    pass


class OrderWarning(UserWarning):
    """Passes were requested in an order known to weaken their effect."""


class ReloadInfeasible(UserWarning):
    """A fragment had to be reloaded synchronously before the optimizer step."""
