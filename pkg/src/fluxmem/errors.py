"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class FluxMemError(Exception):
    """Base class for every error raised by fluxmem."""


# --- graph -----------------------------------------------------------------


class GraphError(FluxMemError):
    pass


class DimensionMismatch(GraphError, ValueError):
    pass


class EmptyContent(GraphError, ValueError):
    pass


class UnknownNode(GraphError, KeyError):
    pass


class UnknownEdge(GraphError, KeyError):
    pass


class KindViolation(GraphError, ValueError):
    pass


class DuplicateEdge(GraphError, ValueError):
    pass


class LayerMismatch(GraphError, ValueError):
    pass


# --- retrieval / context / refinement ----------------------------------------


class UnknownDoc(FluxMemError, KeyError):
    pass


class NegativeInput(FluxMemError, ValueError):
    pass


class StaleNodeRef(FluxMemError, KeyError):
    pass


class EmptySubgraph(FluxMemError):
    pass


class UnknownTarget(FluxMemError, KeyError):
    pass


# --- consolidation -----------------------------------------------------------


class EmptyTrajectory(FluxMemError, ValueError):
    pass


class SkillTooShort(FluxMemError, ValueError):
    pass


# --- adapters ----------------------------------------------------------------


class AdapterError(FluxMemError):
    """Any failure inside an oracle adapter (local or remote)."""


class VerifierUnavailable(AdapterError):
    pass


class ReshaperUnavailable(AdapterError):
    pass


class InductorUnavailable(AdapterError):
    pass


class ExecutorUnavailable(AdapterError):
    pass


class AuthMissing(AdapterError):
    pass


class RemoteTimeout(AdapterError):
    pass


class BadResponse(AdapterError):
    pass


class RetriesExhausted(AdapterError):
    pass


class RefinementAborted(AdapterError):
    """An adapter failed mid-loop; ``trace`` holds the rounds completed so far."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace


class ConsolidationAborted(AdapterError):
    """An adapter failed mid-consolidation; ``histories`` holds the reports so far."""

    def __init__(self, message: str, histories):
        super().__init__(message)
        self.histories = histories


# --- persistence -------------------------------------------------------------


class PersistenceError(FluxMemError):
    pass


class SeqGap(PersistenceError):
    pass


class LogParseError(PersistenceError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FormatVersionMismatch(PersistenceError):
    pass


class ValidateFailed(PersistenceError):
    def __init__(self, violations):
        super().__init__(f"{len(violations)} violation(s): " + "; ".join(map(str, violations[:5])))
        self.violations = violations


class StoreLocked(PersistenceError):
    pass
