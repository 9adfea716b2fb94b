"""Device-to-device graphs and the equal-weight mixing matrices built on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DegenerateTopologyError, InvalidConfigurationError

TOPOLOGY_KINDS = ("full", "ring", "star")


@dataclass(frozen=True)
class Topology:
    """Undirected simple graph on agents ``0 .. n_agents-1``.

    Edges are stored as ordered pairs ``(k, j)`` with ``k < j``.
    """

    n_agents: int
    edges: frozenset[tuple[int, int]]
    kind: str = "custom"
    _neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    _adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise InvalidConfigurationError(f"n_agents must be >= 1, got {self.n_agents}")
        norm = set()
        for k, j in self.edges:
            if k == j:
                raise InvalidConfigurationError(f"self-loop at agent {k}")
            if not (0 <= k < self.n_agents and 0 <= j < self.n_agents):
                raise InvalidConfigurationError(f"edge ({k}, {j}) out of range")
            norm.add((min(k, j), max(k, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        nbrs: list[list[int]] = [[] for _ in range(self.n_agents)]
        for k, j in norm:
            nbrs[k].append(j)
            nbrs[j].append(k)
        object.__setattr__(self, "_neighbors", tuple(tuple(sorted(n)) for n in nbrs))
        a = np.zeros((self.n_agents, self.n_agents))
        for k, j in norm:
            a[k, j] = a[j, k] = 1.0
        a.setflags(write=False)
        object.__setattr__(self, "_adjacency", a)

    @classmethod
    def from_edges(cls, n_agents: int, edges: Iterable[tuple[int, int]], kind: str = "custom") -> "Topology":
        return cls(n_agents, frozenset(edges), kind)

    def neighbors(self, k: int) -> tuple[int, ...]:
        """Neighbors of ``k`` excluding ``k`` itself."""
        return self._neighbors[k]

    def neighborhood(self, k: int) -> tuple[int, ...]:
        """Neighbors of ``k`` including ``k``."""
        return tuple(sorted(self._neighbors[k] + (k,)))

    def degree(self, k: int) -> int:
        return len(self._neighbors[k])

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self._neighbors], dtype=int)

    def adjacency(self) -> np.ndarray:
        return self._adjacency

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        while frontier:
            k = frontier.pop()
            for j in self._neighbors[k]:
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == self.n_agents


def build_topology(kind: str, n_agents: int) -> Topology:
    """Build one of the evaluated connectivity patterns.

    ``star`` uses agent 0 as the hub.  A ring on two agents is the single edge.
    """
    if n_agents < 2:
        raise InvalidConfigurationError(f"topology needs at least 2 agents, got {n_agents}")
    if kind == "full":
        edges = [(k, j) for k in range(n_agents) for j in range(k + 1, n_agents)]
    elif kind == "ring":
        edges = [(k, (k + 1) % n_agents) for k in range(n_agents)]
    elif kind == "star":
        edges = [(0, j) for j in range(1, n_agents)]
    else:
        raise InvalidConfigurationError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")
    return Topology.from_edges(n_agents, edges, kind)


def laplacian(t: Topology) -> np.ndarray:
    """Graph Laplacian ``D - A``."""
    a = t.adjacency()
    return np.diag(a.sum(axis=1)) - a


def spectral_mixing_weight(lap: np.ndarray, tol: float = 1e-9) -> float:
    """Consensus weight ``2 / (lambda_max + lambda_2)`` of a connected-graph Laplacian.

    ``lambda_2`` is the smallest nonzero eigenvalue (algebraic connectivity).
    """
    eig = np.sort(np.linalg.eigvalsh(lap))[::-1]
    if eig.size < 2:
        raise DegenerateTopologyError("need at least two agents for a mixing weight")
    scale = max(1.0, abs(eig[0]))
    if eig[-2] <= tol * scale:
        raise DegenerateTopologyError(
            f"graph is disconnected (second-smallest Laplacian eigenvalue {eig[-2]:.3g})"
        )
    return float(2.0 / (eig[0] + eig[-2]))


@dataclass(frozen=True)
class MixingMatrix:
    weights: np.ndarray
    scalar_weight: float

    @property
    def self_weights(self) -> np.ndarray:
        return np.diag(self.weights).copy()


def build_mixing_matrix(t: Topology, w: float) -> MixingMatrix:
    """``W = I - w L``: weight ``w`` on every edge, ``1 - deg(k) w`` on the diagonal.

    Negative diagonal entries (e.g. a star hub under the spectral weight) are kept.
    """
    if w < 0:
        raise InvalidConfigurationError(f"mixing weight must be non-negative, got {w}")
    weights = np.eye(t.n_agents) - w * laplacian(t)
    weights.setflags(write=False)
    return MixingMatrix(weights, float(w))


def mixing_for(kind: str, n_agents: int) -> tuple[Topology, MixingMatrix]:
    """Topology plus its spectrally weighted mixing matrix."""
    t = build_topology(kind, n_agents)
    return t, build_mixing_matrix(t, spectral_mixing_weight(laplacian(t)))
