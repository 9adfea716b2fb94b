"""Named, keyed random substreams.

Every random quantity in a run is drawn from a stream identified by
``(seed, name, *keys)``.  Streams never share state, so the values an
agent sees do not depend on the order in which agents or cells are
processed.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("data", "init", "xi", "channel", "quantizer", "minibatch")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return a fresh generator for the stream ``(seed, name, *keys)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (_name_key(name),) + tuple(int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


class GaussianRoundStream:
    """Per-agent standard normal vectors indexed by round.

    Row ``s`` of agent ``k`` is a pure function of ``(seed, name, k, s)``:
    the agent's generator is consumed strictly in round order, in chunks
    whose size does not change the values produced.  Rounds must be
    requested in increasing order (the chain drivers do exactly that).
    """

    def __init__(self, seed: int, name: str, n_agents: int, dim: int, chunk: int = 256):
        self.n_agents = n_agents
        self.dim = dim
        self._chunk = chunk
        self._gens = [substream(seed, name, k) for k in range(n_agents)]
        self._buf = np.empty((n_agents, 0, dim))
        self._start = 0

    def draw(self, round_index: int) -> np.ndarray:
        """Return the ``(n_agents, dim)`` standard normal matrix of ``round_index``."""
        offset = round_index - self._start
        if offset < 0:
            raise ValueError(f"round {round_index} already consumed")
        while offset >= self._buf.shape[1]:
            self._start += self._buf.shape[1]
            offset = round_index - self._start
            self._buf = np.stack(
                [g.standard_normal((self._chunk, self.dim)) for g in self._gens]
            )
        return self._buf[:, offset, :]
