"""Exception types raised across the package."""


class InvalidConfigurationError(ValueError):
    """A topology, task or sampler was requested with invalid sizes or constants."""


class DegenerateTopologyError(ValueError):
    """The graph is disconnected, so no consensus weight exists."""


class PowerConstraintError(ValueError):
    """A transmitted block exceeds the per-node energy budget ``m * P``."""

    def __init__(self, agent: int, energy: float, budget: float):
        self.agent = agent
        self.energy = energy
        self.budget = budget
        super().__init__(
            f"agent {agent} violates the power constraint: "
            f"||x||^2 = {energy:.6g} > m*P = {budget:.6g}"
        )


class ProtocolError(RuntimeError):
    """A channel round was invoked with missing or duplicated transmit blocks."""


class NumericalDivergenceError(FloatingPointError):
    """A chain produced non-finite values or left the divergence guard radius."""

    def __init__(self, round_index: int, detail: str = ""):
        self.round_index = round_index
        msg = f"numerical divergence at round {round_index}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UnsupportedTaskError(TypeError):
    """The requested operation does not apply to this model kind."""


class InternalConsistencyError(AssertionError):
    """An internal invariant (power control, bit budget, quantizer range) was broken."""


class ConfigParseError(ValueError):
    """Raised by the config parser; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
