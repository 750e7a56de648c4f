"""Health Check System: agents, receiver, checkers, presenter and a simulated mesh."""

from hcs.core_model import (
    DependencyGraph,
    Event,
    HealthStatus,
    Issue,
    MetricSample,
    RootCauseReport,
    ServiceDescriptor,
    build_dependency_graph,
    classify_failures,
    impacted_by,
    worst_status,
)

__all__ = [
    "DependencyGraph",
    "Event",
    "HealthStatus",
    "Issue",
    "MetricSample",
    "RootCauseReport",
    "ServiceDescriptor",
    "build_dependency_graph",
    "classify_failures",
    "impacted_by",
    "worst_status",
]

__version__ = "0.1.0"
