"""Round-based samplers: SGLD, DSGLD, channel-driven DSGLD, DSGD and quantized DSGD.

Per-round operations act on stacked iterates ``thetas`` of shape
``(N, m)``; row ``k`` belongs to agent ``k``.  Every agent's update
reads only round-``s`` values, so the update order within a round cannot
matter.  :func:`run_chain` drives a full chain and keeps the post
burn-in samples.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import compression
from .channel import ChannelNoise, ChannelParams, TransmitBlock, block_energy, check_power, receive_matrix
from .errors import InternalConsistencyError, InvalidConfigurationError, NumericalDivergenceError
from .rng import GaussianRoundStream, substream
from .topology import MixingMatrix, Topology

ALGORITHMS = ("sgld", "dsgld", "cd-dsgld", "dsgd", "q-dsgd")
BAYESIAN = ("sgld", "dsgld", "cd-dsgld")
FLUSH_TO_ZERO = 1e-200


@dataclass(frozen=True)
class SamplerConfig:
    algorithm: str = "cd-dsgld"
    step_size: float = 1e-4
    total_rounds: int = 15_000
    burn_in: int = 14_900
    n_bits: int | None = 10
    unlimited_budget: bool = False
    batch_fraction: float = 1.0
    divergence_radius: float = 1e6

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise InvalidConfigurationError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not self.step_size > 0:
            raise InvalidConfigurationError("step size must be positive")
        if self.total_rounds < 1:
            raise InvalidConfigurationError("total_rounds must be >= 1")
        if not 0 <= self.burn_in < self.total_rounds:
            raise InvalidConfigurationError("burn_in must satisfy 0 <= burn_in < total_rounds")
        if self.n_bits is not None and self.n_bits < 2:
            raise InvalidConfigurationError("n_bits must be >= 2")

    @property
    def retained(self) -> int:
        return self.total_rounds - self.burn_in

    @property
    def is_bayesian(self) -> bool:
        return self.algorithm in BAYESIAN


@dataclass(frozen=True)
class PowerControl:
    alphas: np.ndarray
    beta: float


@dataclass
class ChainState:
    """Iterates of all agents, the round counter and the retained samples."""

    thetas: np.ndarray
    round: int
    samples: np.ndarray
    n_retained: int = 0
    replicas: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @classmethod
    def start(cls, thetas: np.ndarray, retained: int) -> "ChainState":
        thetas = np.array(thetas, dtype=float)
        n, m = thetas.shape
        return cls(thetas, 0, np.empty((n, retained, m)))

    def retain(self) -> None:
        self.samples[:, self.n_retained] = self.thetas
        self.n_retained += 1


# -- single-round updates -----------------------------------------------------


def _check_finite(grads: np.ndarray, round_index: int) -> None:
    if not np.all(np.isfinite(grads)):
        raise NumericalDivergenceError(round_index, "non-finite gradient")


def sgld_step(theta: np.ndarray, grad: np.ndarray, step_size: float, xi: np.ndarray, round_index: int = 0) -> np.ndarray:
    """``theta - eta grad + sqrt(2 eta) xi``."""
    _check_finite(grad, round_index)
    return theta - step_size * grad + math.sqrt(2.0 * step_size) * xi


def mix(weights: np.ndarray, own: np.ndarray, others: np.ndarray) -> np.ndarray:
    """``w_kk own_k + sum_{j != k} w_kj others_j`` for every ``k``.

    With ``others is own`` this is ``W @ thetas``; the split form lets the
    digital baseline use neighbor replicas with identical arithmetic.
    """
    diag = np.diag(weights)
    off = weights - np.diag(diag)
    return diag[:, None] * own + off @ others


def dsgld_round(
    thetas: np.ndarray, weights: np.ndarray, grads: np.ndarray, step_size: float, xi: np.ndarray, round_index: int = 0
) -> np.ndarray:
    """Mix with ``W``, take a gradient step on ``f_k`` and add ``sqrt(2 eta) xi_k``."""
    _check_finite(grads, round_index)
    return mix(weights, thetas, thetas) - step_size * grads + math.sqrt(2.0 * step_size) * xi


def dsgd_round(thetas: np.ndarray, weights: np.ndarray, grads: np.ndarray, step_size: float, round_index: int = 0) -> np.ndarray:
    """:func:`dsgld_round` without injected noise."""
    _check_finite(grads, round_index)
    return mix(weights, thetas, thetas) - step_size * grads


def receiver_scaling(noise_power: float, step_size: float) -> float:
    """``beta = sqrt(N0 / (2 eta))`` turns channel noise into Langevin noise of variance ``2 eta``."""
    return math.sqrt(noise_power / (2.0 * step_size))


def encode_transmit(
    theta: np.ndarray, w: float, alpha: float, agent: int = 0, params: ChannelParams | None = None
) -> TransmitBlock:
    """Uncoded analog block ``x_j = w alpha_j theta_j``."""
    x = (w * alpha) * np.asarray(theta, dtype=float)
    if params is not None and not check_power(x, params):
        raise InternalConsistencyError(f"power control produced an infeasible block for agent {agent}")
    return TransmitBlock(agent, x)


def optimize_power_control(thetas: np.ndarray, w: float, beta: float, params: ChannelParams) -> PowerControl:
    """Per-transmitter scaling closest to ``beta`` that respects ``||w alpha theta||^2 <= m P``.

    ``alpha_j = min(beta, sqrt(m P) / (w ||theta_j||))``; rounding is
    corrected downward so the emitted block always passes the exact check.
    """
    thetas = np.atleast_2d(thetas)
    alphas = np.full(thetas.shape[0], float(beta))
    if w <= 0:
        return PowerControl(alphas, float(beta))
    norms = np.sqrt(block_energy(thetas))
    with np.errstate(divide="ignore"):
        cap = np.sqrt(params.energy_budget) / (w * norms)
    alphas = np.minimum(alphas, cap)
    energy = block_energy((w * alphas)[:, None] * thetas)
    for j in np.flatnonzero(energy > params.energy_budget):
        a = alphas[j]
        while block_energy((w * a) * thetas[j]) > params.energy_budget:
            a = np.nextafter(a, 0.0)
        alphas[j] = a
    return PowerControl(alphas, float(beta))


def solve_power_control_numeric(thetas: np.ndarray, w: float, beta: float, params: ChannelParams) -> PowerControl:
    """Numeric solution of the scaling problem, kept as a cross-check.

    Minimizes ``sum_j ||(w / beta) alpha_j theta_j - w theta_j||^2`` over
    ``alpha > 0`` with the raw power constraints handed to SLSQP.  Variables
    are ``u_j = alpha_j / beta``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = thetas.shape[0]
    sq = block_energy(thetas)
    wt = (w * w) * sq
    norm = max(wt.sum(), 1e-300)
    budget = params.energy_budget

    def objective(u):
        return float(np.sum(wt * (u - 1.0) ** 2) / norm)

    def jac(u):
        return 2.0 * wt * (u - 1.0) / norm

    cons = [
        {
            "type": "ineq",
            "fun": (lambda u, j=j: 1.0 - (w * beta * u[j]) ** 2 * sq[j] / budget),
            "jac": (lambda u, j=j: np.eye(n)[j] * (-2.0 * (w * beta) ** 2 * u[j] * sq[j] / budget)),
        }
        for j in range(n)
    ]
    with warnings.catch_warnings():
        # SLSQP notes when a line search steps outside the bounds; it clips and carries on
        warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
        res = optimize.minimize(
            objective, x0=np.full(n, 1e-3), jac=jac, method="SLSQP",
            bounds=[(1e-12, None)] * n, constraints=cons, options={"ftol": 1e-16, "maxiter": 500},
        )
    return PowerControl(res.x * beta, float(beta))


def cd_dsgld_round(
    thetas: np.ndarray,
    topology: Topology,
    mixing: MixingMatrix,
    params: ChannelParams,
    grads: np.ndarray,
    step_size: float,
    noise: np.ndarray | None,
    power: PowerControl | None = None,
    round_index: int = 0,
) -> tuple[np.ndarray, PowerControl]:
    """One channel-driven round.

    Every agent transmits ``w alpha_j theta_j`` at once; agent ``k`` applies
    ``w_kk theta_k + y_k / beta - eta grad f_k(theta_k)``.  ``noise`` are the
    receivers' standard normal draws (scaled by ``sqrt(N0)`` in the channel).
    """
    _check_finite(grads, round_index)
    w = mixing.scalar_weight
    beta = receiver_scaling(params.noise_power, step_size)
    if power is None:
        power = optimize_power_control(thetas, w, beta, params)
    x = (w * power.alphas)[:, None] * thetas
    y = receive_matrix(x, topology, params, noise)
    new = np.diag(mixing.weights)[:, None] * thetas + y / beta - step_size * grads
    return new, power


@dataclass
class DigitalLinks:
    """Per-agent state of the quantized baseline.

    ``replicas[j]`` is what every neighbor currently holds for agent ``j``;
    ``t[j]`` the number of entries ``j`` may send per block.
    """

    replicas: np.ndarray
    t: np.ndarray
    budgets: np.ndarray
    n_bits: int | None
    rngs: list

    @classmethod
    def setup(
        cls, topology: Topology, params: ChannelParams, n_bits: int | None, seed: int, unlimited: bool = False
    ) -> "DigitalLinks":
        n, m = topology.n_agents, params.block_length
        ts = np.empty(n, dtype=int)
        budgets = np.empty(n)
        value_bits = compression.RAW_VALUE_BITS if n_bits is None else n_bits
        header = 0 if n_bits is None else n_bits
        for k in range(n):
            if unlimited:
                budgets[k] = math.inf
                ts[k] = m
                continue
            budgets[k] = compression.bits_per_block(params, topology.degree(k) + 1)
            usable = math.floor(budgets[k]) - header
            ts[k] = compression.select_t(m, value_bits, float(usable)) if usable >= 0 else 0
        rngs = [substream(seed, "quantizer", k) for k in range(n)]
        return cls(np.zeros((n, m)), ts, budgets, n_bits, rngs)


def q_dsgd_round(
    thetas: np.ndarray,
    links: DigitalLinks,
    mixing: MixingMatrix,
    grads: np.ndarray,
    step_size: float,
    round_index: int = 0,
    order: Sequence[int] | None = None,
) -> np.ndarray:
    """Each agent sends a compressed correction of its replica, then DSGD mixing runs on replicas.

    ``order`` is the sequence in which agents encode; it cannot change the
    result because every encoder reads only its own round-``s`` state.
    """
    _check_finite(grads, round_index)
    for j in range(thetas.shape[0]) if order is None else order:
        residual = thetas[j] - links.replicas[j]
        msg, memory = compression.compress(residual, int(links.t[j]), links.n_bits, links.rngs[j])
        if msg.bit_count > links.budgets[j]:
            raise InternalConsistencyError(
                f"agent {j} message of {msg.bit_count} bits exceeds budget {links.budgets[j]:.3f}"
            )
        # equals replicas[j] + decode(msg); this form is exact in the lossless limit
        links.replicas[j] = thetas[j] - memory
    return mix(mixing.weights, thetas, links.replicas) - step_size * grads


# -- chain drivers ------------------------------------------------------------


@dataclass
class ChainResult:
    samples: np.ndarray
    final: np.ndarray
    stats: dict

    def pooled(self) -> np.ndarray:
        """All retained samples of all agents, shape ``(N * K, m)``."""
        return self.samples.reshape(-1, self.samples.shape[-1])


GradientFn = Callable[[np.ndarray], np.ndarray]


def run_chain(
    grad_fn: GradientFn,
    init: np.ndarray,
    config: SamplerConfig,
    seed: int,
    topology: Topology | None = None,
    mixing: MixingMatrix | None = None,
    params: ChannelParams | None = None,
    xi_override: Callable[[int], np.ndarray] | None = None,
    noise_override: Callable[[int], np.ndarray] | None = None,
) -> ChainResult:
    """Run ``config.total_rounds`` synchronous rounds from ``init`` (shape ``(N, m)``).

    ``grad_fn`` maps the stacked iterates to stacked ``grad f_k``.  For
    ``sgld`` the single row of ``init`` is the centralized chain and
    ``grad_fn`` must return the full-posterior gradient.
    """
    state = ChainState.start(init, config.retained)
    n, m = state.thetas.shape
    alg = config.algorithm
    eta = config.step_size
    if alg == "sgld":
        if n != 1:
            raise InvalidConfigurationError("centralized SGLD runs a single chain")
        weights = np.ones((1, 1))
    else:
        if topology is None or mixing is None:
            raise InvalidConfigurationError(f"{alg} needs a topology and mixing matrix")
        weights = mixing.weights
    if alg in ("cd-dsgld", "q-dsgd") and params is None:
        raise InvalidConfigurationError(f"{alg} needs channel parameters")

    xi_stream = GaussianRoundStream(seed, "xi", n, m) if config.is_bayesian and alg != "cd-dsgld" else None
    noise = ChannelNoise(seed, n, m) if alg == "cd-dsgld" else None
    links = (
        DigitalLinks.setup(topology, params, config.n_bits, seed, config.unlimited_budget) if alg == "q-dsgd" else None
    )
    if links is not None:
        state.replicas = links.replicas
        state.stats["t"] = links.t.tolist()
    alpha_ratio_sum = 0.0
    saturated_rounds = 0
    radius2 = config.divergence_radius ** 2

    for s in range(1, config.total_rounds + 1):
        grads = grad_fn(state.thetas)
        if alg in ("sgld", "dsgld"):
            xi = xi_override(s) if xi_override is not None else xi_stream.draw(s)
            new = dsgld_round(state.thetas, weights, grads, eta, xi, s)
        elif alg == "cd-dsgld":
            z = noise_override(s) if noise_override is not None else noise.standard(s)
            new, pc = cd_dsgld_round(state.thetas, topology, mixing, params, grads, eta, z, round_index=s)
            ratio = pc.alphas / pc.beta
            alpha_ratio_sum += float(ratio.mean())
            saturated_rounds += int(np.any(ratio < 1.0))
        elif alg == "dsgd":
            new = dsgd_round(state.thetas, weights, grads, eta, s)
        else:
            new = q_dsgd_round(state.thetas, links, mixing, grads, eta, s)
        if not np.all(np.isfinite(new)) or np.max(block_energy(new)) > radius2:
            raise NumericalDivergenceError(s, f"iterate norm exceeded {config.divergence_radius:g}")
        # geometric decay of untouched coordinates otherwise ends in subnormals, which are very slow
        new[np.abs(new) < FLUSH_TO_ZERO] = 0.0
        state.thetas = new
        state.round = s
        if s > config.burn_in:
            state.retain()

    if alg == "cd-dsgld":
        state.stats["mean_alpha_over_beta"] = alpha_ratio_sum / config.total_rounds
        state.stats["power_limited_rounds"] = saturated_rounds
    return ChainResult(state.samples, state.thetas, state.stats)
