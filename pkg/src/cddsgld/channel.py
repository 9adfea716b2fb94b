"""Full-duplex AWGN multiple-access channel with over-the-air superposition.

In every block each agent receives the sum of its neighbors' transmitted
blocks (never its own) plus independent Gaussian noise of variance ``N0``
per channel use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidConfigurationError, PowerConstraintError, ProtocolError
from .rng import GaussianRoundStream
from .topology import Topology


@dataclass(frozen=True)
class ChannelParams:
    noise_power: float
    power_budget: float
    block_length: int

    def __post_init__(self) -> None:
        if not self.noise_power > 0:
            raise InvalidConfigurationError("noise power N0 must be positive")
        if not self.power_budget > 0:
            raise InvalidConfigurationError("power budget P must be positive")
        if self.block_length < 1:
            raise InvalidConfigurationError("block length must be >= 1")

    @property
    def snr(self) -> float:
        return self.power_budget / self.noise_power

    @property
    def snr_db(self) -> float:
        return 10.0 * np.log10(self.snr)

    @property
    def energy_budget(self) -> float:
        """``m * P``, the bound on ``||x||^2`` for one block."""
        return self.block_length * self.power_budget

    @classmethod
    def from_snr_db(cls, snr_db: float, block_length: int, power_budget: float = 1.0) -> "ChannelParams":
        return cls(noise_power_from_snr_db(snr_db, power_budget), power_budget, block_length)


def noise_power_from_snr_db(snr_db: float, power_budget: float = 1.0) -> float:
    return power_budget / 10.0 ** (snr_db / 10.0)


@dataclass(frozen=True)
class TransmitBlock:
    agent: int
    signal: np.ndarray


@dataclass(frozen=True)
class ReceiveBlock:
    agent: int
    signal: np.ndarray


def block_energy(x: np.ndarray) -> np.ndarray:
    """``||x||^2`` of a block, or of each row of a stack of blocks."""
    x = np.asarray(x, dtype=float)
    return np.einsum("...i,...i->...", x, x)


def check_power(x: np.ndarray, params: ChannelParams) -> bool:
    """``||x||^2 <= m P`` with no tolerance."""
    return bool(block_energy(x) <= params.energy_budget)


class ChannelNoise:
    """Standard normal noise per (receiver, block), keyed by ``(seed, "channel", k, s)``."""

    def __init__(self, seed: int, n_agents: int, block_length: int):
        self._stream = GaussianRoundStream(seed, "channel", n_agents, block_length)

    def standard(self, round_index: int) -> np.ndarray:
        return self._stream.draw(round_index)


def _stack_blocks(blocks: Sequence[TransmitBlock], n_agents: int, params: ChannelParams) -> np.ndarray:
    x = np.empty((n_agents, params.block_length))
    seen = set()
    for b in blocks:
        if not 0 <= b.agent < n_agents:
            raise ProtocolError(f"block from unknown agent {b.agent}")
        if b.agent in seen:
            raise ProtocolError(f"agent {b.agent} transmitted twice in one block")
        sig = np.asarray(b.signal, dtype=float)
        if sig.shape != (params.block_length,):
            raise ProtocolError(f"agent {b.agent} sent {sig.shape[0]} symbols, block length is {params.block_length}")
        seen.add(b.agent)
        x[b.agent] = sig
    missing = sorted(set(range(n_agents)) - seen)
    if missing:
        raise ProtocolError(f"missing transmit blocks from agents {missing}")
    return x


def receive_matrix(
    x: np.ndarray, topology: Topology, params: ChannelParams, noise: np.ndarray | None
) -> np.ndarray:
    """Array form of :func:`transmit_round`: row ``j`` of ``x`` is agent ``j``'s block."""
    energy = block_energy(x)
    bad = np.flatnonzero(energy > params.energy_budget)
    if bad.size:
        j = int(bad[0])
        raise PowerConstraintError(j, float(energy[j]), params.energy_budget)
    y = topology.adjacency() @ x
    if noise is not None:
        if noise.shape != y.shape:
            raise ProtocolError(f"noise shape {noise.shape} does not match received shape {y.shape}")
        y = y + np.sqrt(params.noise_power) * noise
    return y


def transmit_round(
    blocks: Sequence[TransmitBlock],
    topology: Topology,
    params: ChannelParams,
    noise: np.ndarray | None,
) -> list[ReceiveBlock]:
    """One block of simultaneous transmissions.

    ``noise`` holds one row of standard normal draws per receiver; it is
    scaled by ``sqrt(N0)``.  ``None`` gives the noiseless channel.
    """
    x = _stack_blocks(blocks, topology.n_agents, params)
    noise = None if noise is None else np.asarray(noise, dtype=float)
    y = receive_matrix(x, topology, params, noise)
    return [ReceiveBlock(k, y[k]) for k in range(topology.n_agents)]
