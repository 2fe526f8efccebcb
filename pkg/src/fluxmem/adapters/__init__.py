"""Pluggable implementations of every model-dependent role.

``reference_suite`` wires the deterministic implementations used by tests and
the simulation; ``remote_suite`` swaps in HTTP-backed ones without changing
any signature or file format.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..consolidation import Inductor, IntersectionInductor
from ..embedding import HashEmbedder
from ..graph import DEFAULT_DIMENSION
from ..refinement import Attributor, Executor, Reshaper, attribute, halving_reshaper
from ..retrieval import Embedder, JaccardVerifier, Verifier
from .remote import (
    HttpTransport,
    RemoteConfig,
    RemoteEmbedder,
    RemoteExecutor,
    RemoteInductor,
    RemoteReshaper,
    RemoteVerifier,
    remote_complete,
    remote_embed,
)


@dataclass
class AdapterSuite:
    embedder: Embedder
    verifier: Verifier
    inductor: Inductor
    reshaper: Reshaper
    attributor: Attributor
    executor: Executor

    @property
    def deterministic(self) -> bool:
        """True only when every member declares itself deterministic."""
        members = (self.embedder, self.verifier, self.inductor, self.executor)
        return all(getattr(m, "deterministic", False) for m in members)


def reference_suite(seed: int, dimension: int = DEFAULT_DIMENSION, world=None) -> AdapterSuite:
    """Deterministic suite; the executor answers for the sim world of ``seed``."""
    from ..sim import SyntheticExecutor, generate_world

    return AdapterSuite(
        embedder=HashEmbedder(dimension),
        verifier=JaccardVerifier(),
        inductor=IntersectionInductor(),
        reshaper=halving_reshaper,
        attributor=attribute,
        executor=SyntheticExecutor(world if world is not None else generate_world(seed)),
    )


def remote_suite(config: RemoteConfig, transport: HttpTransport | None = None) -> AdapterSuite:
    """HTTP-backed suite. The attributor stays the reference mapping table."""
    transport = transport or HttpTransport(config)
    return AdapterSuite(
        embedder=RemoteEmbedder(config, transport),
        verifier=RemoteVerifier(config, transport),
        inductor=RemoteInductor(config, transport),
        reshaper=RemoteReshaper(config, transport),
        attributor=attribute,
        executor=RemoteExecutor(config, transport),
    )


__all__ = [
    "AdapterSuite",
    "HttpTransport",
    "RemoteConfig",
    "reference_suite",
    "remote_complete",
    "remote_embed",
    "remote_suite",
]
