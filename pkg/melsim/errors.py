"""
Exception tree for melsim.

Every error carries the name of the module that raised it and, when known,
the step and entity involved, so the CLI can print a one-line diagnostic
naming where the run stopped.
"""

from __future__ import annotations

from dataclasses import dataclass


class MelsimError(RuntimeError):
    """Base class for all simulation errors."""

    module = "melsim"

    def __init__(self, message: str, *, step: int | None = None, entity: int | None = None) -> None:
        super().__init__(message)
        self.step = step
        self.entity = entity

    def diagnostic(self) -> str:
        """One-line description: module, step, entity, message."""
        parts = [f"[{self.module}]"]
        if self.step is not None:
            parts.append(f"step={self.step}")
        if self.entity is not None:
            parts.append(f"entity={self.entity}")
        parts.append(str(self))
        return " ".join(parts)


@dataclass(frozen=True)
class ConfigIssue:
    """One validation failure: dotted field path plus the violated constraint."""

    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class ConfigError(MelsimError, ValueError):
    module = "cli-harness"

    def __init__(self, issues: list[ConfigIssue]) -> None:
        self.issues = list(issues)
        summary = "; ".join(str(i) for i in self.issues) or "invalid configuration"
        super().__init__(summary)


class ConstructionError(MelsimError):
    module = "kernel"


class ContractViolation(MelsimError):
    module = "kernel"


class CausalityError(MelsimError):
    module = "pads-runtime"


class RoutingError(MelsimError):
    module = "pads-runtime"


class ProtocolError(MelsimError):
    module = "pads-runtime"


class MigrationError(MelsimError):
    module = "adaptive-migration"


class LevelProtocolError(ProtocolError):
    """Cross-level timing violation (misaligned fine clock, non-boundary delivery)."""

    module = "multilevel-coordinator"


class LevelConfigError(MelsimError, ValueError):
    module = "multilevel-coordinator"


class RefinementError(MelsimError):
    module = "multilevel-coordinator"


class GraphParseError(MelsimError, ValueError):
    module = "traffic-scenario"


class InvariantError(MelsimError):
    module = "traffic-scenario"
