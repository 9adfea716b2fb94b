"""Learning tasks: Gaussian prior, per-agent likelihoods and their potentials.

Each agent ``k`` owns the local potential

    f_k(theta) = -log p(D_k | theta) + ||theta||^2 / (2 N)

so that the potentials of the ``N`` agents sum to the negative log of the
unnormalized global posterior under a standard Gaussian prior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidConfigurationError, UnsupportedTaskError
from .rng import substream

TASK_KINDS = ("conjugate-gaussian", "logistic-regression", "softmax-mlp")
CLASSIFIER_KINDS = ("logistic-regression", "softmax-mlp")


@dataclass(frozen=True)
class ModelSpec:
    """Model family and sizes.

    ``input_dim`` is the observation dimension for ``conjugate-gaussian``
    (where it equals the parameter dimension) and the feature dimension
    for the classifiers.  The prior is always ``N(0, I_m)``.
    """

    kind: str
    input_dim: int
    n_classes: int = 2
    hidden: int = 0
    noise_var: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise InvalidConfigurationError(f"unknown task kind {self.kind!r}")
        if self.input_dim < 1:
            raise InvalidConfigurationError("input_dim must be >= 1")
        if self.kind == "logistic-regression" and self.n_classes != 2:
            raise InvalidConfigurationError("logistic regression is binary (n_classes = 2)")
        if self.kind == "softmax-mlp" and (self.hidden < 1 or self.n_classes < 2):
            raise InvalidConfigurationError("softmax-mlp needs hidden >= 1 and n_classes >= 2")
        if self.noise_var <= 0:
            raise InvalidConfigurationError("noise_var must be positive")

    @property
    def dim(self) -> int:
        """Length ``m`` of the parameter vector."""
        if self.kind == "conjugate-gaussian":
            return self.input_dim
        if self.kind == "logistic-regression":
            return self.input_dim + 1
        d, h, c = self.input_dim, self.hidden, self.n_classes
        return d * h + h + h * c + c

    @property
    def is_classifier(self) -> bool:
        return self.kind in CLASSIFIER_KINDS


@dataclass(frozen=True)
class Dataset:
    """Examples ``(inputs[h], labels[h])``; labels are ``0 .. C-1`` or absent."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {x.shape}")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValueError("labels must align with inputs")
            object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def empty(cls, input_dim: int, labelled: bool = True) -> "Dataset":
        return cls(np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64) if labelled else None)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        x = np.concatenate([p.inputs for p in parts])
        if all(p.labels is not None for p in parts):
            return cls(x, np.concatenate([p.labels for p in parts]))
        return cls(x)


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class Task:
    """A generated learning problem split across agents."""

    spec: ModelSpec
    agents: tuple[Dataset, ...]
    test: Dataset
    truth: np.ndarray | None = field(default=None, compare=False)

    @property
    def pooled(self) -> Dataset:
        return Dataset.concat(self.agents)


# -- parameter layout -------------------------------------------------------


def unpack_mlp(spec: ModelSpec, theta: np.ndarray):
    """Views ``(W1, b1, W2, b2)`` into a (batch of) flat MLP parameter vectors."""
    d, h, c = spec.input_dim, spec.hidden, spec.n_classes
    lead = theta.shape[:-1]
    i = 0
    w1 = theta[..., i:i + d * h].reshape(lead + (d, h))
    i += d * h
    b1 = theta[..., i:i + h]
    i += h
    w2 = theta[..., i:i + h * c].reshape(lead + (h, c))
    i += h * c
    b2 = theta[..., i:i + c]
    return w1, b1, w2, b2


def _check_theta(spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != spec.dim:
        raise ValueError(f"parameter length {theta.shape[-1]} does not match model dimension {spec.dim}")
    return theta


def _check_data(spec: ModelSpec, data: Dataset) -> None:
    if len(data) and data.inputs.shape[1] != spec.input_dim:
        raise ValueError(f"input dimension {data.inputs.shape[1]} does not match model ({spec.input_dim})")
    if spec.is_classifier and len(data):
        if data.labels is None:
            raise ValueError("classifier data must be labelled")
        if data.labels.min() < 0 or data.labels.max() >= spec.n_classes:
            raise ValueError("label out of range")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(spec: ModelSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class scores for ``inputs`` of shape ``(..., E, d)``.

    Logistic regression is expressed as the two-class softmax with scores ``(0, a)``.
    """
    if not spec.is_classifier:
        raise UnsupportedTaskError(f"{spec.kind} has no predictive class distribution")
    theta = _check_theta(spec, theta)
    if spec.kind == "logistic-regression":
        a = inputs @ theta[..., :-1, None] + theta[..., -1:, None]
        return np.concatenate([np.zeros_like(a), a], axis=-1)
    w1, b1, w2, b2 = unpack_mlp(spec, theta)
    hid = np.tanh(inputs @ w1 + b1[..., None, :])
    return hid @ w2 + b2[..., None, :]


def predictive_distribution(spec: ModelSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Softmax output; a single input vector gives one probability vector."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        return predictive_distribution(spec, theta, x[None, :])[0]
    return _softmax(logits(spec, theta, x))


# -- potentials --------------------------------------------------------------


def neg_log_likelihood(spec: ModelSpec, data: Dataset, theta: np.ndarray) -> float:
    """``-log p(D | theta)`` up to a theta-independent constant."""
    theta = _check_theta(spec, theta)
    _check_data(spec, data)
    if len(data) == 0:
        return 0.0
    if spec.kind == "conjugate-gaussian":
        r = data.inputs - theta
        return float(0.5 * np.sum(r * r) / spec.noise_var)
    logp = _log_softmax(logits(spec, theta, data.inputs))
    return float(-logp[np.arange(len(data)), data.labels].sum())


def local_potential(spec: ModelSpec, data: Dataset, theta: np.ndarray, n_agents: int) -> float:
    """``f_k(theta)``: local negative log-likelihood plus a ``1/N`` share of the prior."""
    theta = _check_theta(spec, theta)
    return neg_log_likelihood(spec, data, theta) + 0.5 * float(theta @ theta) / n_agents


def _nll_grad_batched(spec: ModelSpec, x: np.ndarray, y: np.ndarray | None, theta: np.ndarray) -> np.ndarray:
    """Gradient of the summed NLL for stacked data ``x (..., E, d)`` and ``theta (..., m)``."""
    if spec.kind == "conjugate-gaussian":
        e = x.shape[-2]
        return (e * theta - x.sum(axis=-2)) / spec.noise_var
    onehot = np.zeros(x.shape[:-1] + (spec.n_classes,))
    np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
    if spec.kind == "logistic-regression":
        a = (x @ theta[..., :-1, None])[..., 0] + theta[..., -1:]
        p1 = 1.0 / (1.0 + np.exp(-a))
        r = p1 - onehot[..., 1]
        gw = (r[..., None, :] @ x)[..., 0, :]
        return np.concatenate([gw, r.sum(axis=-1, keepdims=True)], axis=-1)
    w1, b1, w2, b2 = unpack_mlp(spec, theta)
    hid = np.tanh(x @ w1 + b1[..., None, :])
    dz = _softmax(hid @ w2 + b2[..., None, :]) - onehot
    g_w2 = np.swapaxes(hid, -1, -2) @ dz
    g_b2 = dz.sum(axis=-2)
    dh = (dz @ np.swapaxes(w2, -1, -2)) * (1.0 - hid * hid)
    g_w1 = np.swapaxes(x, -1, -2) @ dh
    g_b1 = dh.sum(axis=-2)
    lead = theta.shape[:-1]
    return np.concatenate(
        [g_w1.reshape(lead + (-1,)), g_b1, g_w2.reshape(lead + (-1,)), g_b2], axis=-1
    )


def local_potential_gradient(spec: ModelSpec, data: Dataset, theta: np.ndarray, n_agents: int) -> np.ndarray:
    """Full-batch ``grad f_k(theta) = -grad log p(D_k | theta) + theta / N``."""
    theta = _check_theta(spec, theta)
    if theta.ndim != 1:
        raise ValueError("theta must be a flat vector")
    _check_data(spec, data)
    g = theta / n_agents
    if len(data):
        g = g + _nll_grad_batched(spec, data.inputs, data.labels, theta)
    return g


class AgentGradients:
    """Evaluates ``grad f_k(theta_k)`` for all agents at once.

    Equal-size local datasets are stacked so a round costs one batched
    forward/backward pass.  With ``batch_fraction < 1`` each agent draws
    a fresh mini-batch per round from its own ``minibatch`` substream and
    rescales the likelihood term by ``E_k / B_k``.
    """

    def __init__(self, spec: ModelSpec, datasets: Sequence[Dataset], batch_fraction: float = 1.0, seed: int = 0):
        if not 0 < batch_fraction <= 1:
            raise InvalidConfigurationError("batch_fraction must be in (0, 1]")
        for d in datasets:
            _check_data(spec, d)
        self.spec = spec
        self.datasets = tuple(datasets)
        self.n_agents = len(datasets)
        self.batch_fraction = batch_fraction
        sizes = {len(d) for d in datasets}
        self._stacked = None
        if batch_fraction == 1.0 and len(sizes) == 1 and sizes != {0}:
            x = np.stack([d.inputs for d in datasets])
            y = np.stack([d.labels for d in datasets]) if spec.is_classifier else None
            self._stacked = (x, y)
        self._mb_rngs = (
            [substream(seed, "minibatch", k) for k in range(self.n_agents)] if batch_fraction < 1 else None
        )

    def __call__(self, thetas: np.ndarray) -> np.ndarray:
        prior = thetas / self.n_agents
        if self._stacked is not None:
            x, y = self._stacked
            return prior + _nll_grad_batched(self.spec, x, y, thetas)
        out = prior.copy()
        for k, data in enumerate(self.datasets):
            e = len(data)
            if e == 0:
                continue
            if self._mb_rngs is None:
                out[k] += _nll_grad_batched(self.spec, data.inputs, data.labels, thetas[k])
            else:
                b = max(1, int(round(self.batch_fraction * e)))
                idx = np.sort(self._mb_rngs[k].choice(e, size=b, replace=False))
                y = data.labels[idx] if data.labels is not None else None
                out[k] += (e / b) * _nll_grad_batched(self.spec, data.inputs[idx], y, thetas[k])
        return out


def exact_posterior(spec: ModelSpec, datasets: Dataset | Sequence[Dataset]) -> GaussianPosterior:
    """Closed-form global posterior of the conjugate Gaussian task."""
    if spec.kind != "conjugate-gaussian":
        raise UnsupportedTaskError(f"no closed-form posterior for {spec.kind}")
    data = datasets if isinstance(datasets, Dataset) else Dataset.concat(list(datasets))
    _check_data(spec, data)
    m = spec.dim
    precision = 1.0 + len(data) / spec.noise_var
    cov = np.eye(m) / precision
    mean = cov @ (data.inputs.sum(axis=0) / spec.noise_var) if len(data) else np.zeros(m)
    return GaussianPosterior(mean, cov)


# -- synthetic data ----------------------------------------------------------


def _class_counts(n_agents: int, n_classes: int, per_class: int, class_skew: float) -> np.ndarray:
    """Per-agent, per-class counts; skew moves mass onto class ``k mod C`` while keeping totals."""
    counts = np.full((n_agents, n_classes), per_class, dtype=int)
    if class_skew > 0:
        taken = int(round(class_skew * per_class))
        for k in range(n_agents):
            fav = k % n_classes
            for c in range(n_classes):
                if c != fav:
                    counts[k, c] -= taken
                    counts[k, fav] += taken
    return counts


def generate_synthetic_task(
    seed: int,
    kind: str,
    input_dim: int,
    n_agents: int,
    *,
    n_classes: int = 6,
    per_class: int = 40,
    hidden: int = 16,
    validation_size: int = 2400,
    separation: float = 1.0,
    label_noise: float = 0.0,
    class_skew: float = 0.0,
    observations_per_agent: int = 4,
    noise_var: float = 1.0,
) -> Task:
    """Reproducible desk-scale task split across ``n_agents``.

    Classifier inputs are Gaussian clusters around class means drawn with
    scale ``separation``; ``label_noise`` relabels that fraction of training
    and test examples uniformly at random.  The conjugate task draws a true
    parameter from the prior and ``observations_per_agent`` noisy copies per
    agent.
    """
    if not 0 <= class_skew < 1:
        raise InvalidConfigurationError("class_skew must be in [0, 1)")
    rng = substream(seed, "data")
    if kind == "conjugate-gaussian":
        spec = ModelSpec(kind, input_dim, noise_var=noise_var)
        truth = rng.standard_normal(input_dim)
        sd = np.sqrt(noise_var)
        agents = tuple(
            Dataset(truth + sd * rng.standard_normal((observations_per_agent, input_dim)))
            for _ in range(n_agents)
        )
        test = Dataset(truth + sd * rng.standard_normal((validation_size, input_dim)))
        return Task(spec, agents, test, truth)

    if kind == "logistic-regression":
        n_classes = 2
    spec = ModelSpec(kind, input_dim, n_classes=n_classes, hidden=hidden if kind == "softmax-mlp" else 0)
    if validation_size % n_classes:
        raise InvalidConfigurationError("validation_size must split evenly across classes")
    means = separation * rng.standard_normal((n_classes, input_dim))

    def draw(counts: np.ndarray) -> Dataset:
        labels = np.repeat(np.arange(n_classes), counts)
        x = means[labels] + rng.standard_normal((labels.size, input_dim))
        if label_noise > 0:
            flip = rng.random(labels.size) < label_noise
            labels = labels.copy()
            labels[flip] = rng.integers(0, n_classes, size=int(flip.sum()))
        order = rng.permutation(labels.size)
        return Dataset(x[order], labels[order])

    counts = _class_counts(n_agents, n_classes, per_class, class_skew)
    agents = tuple(draw(counts[k]) for k in range(n_agents))
    test = draw(np.full(n_classes, validation_size // n_classes))
    return Task(spec, agents, test, None)


def save_dataset_csv(path: str | Path, data: Dataset) -> None:
    """One row per example; the label (if any) is the last column."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for h in range(len(data)):
            row = [repr(float(v)) for v in data.inputs[h]]
            if data.labels is not None:
                row.append(str(int(data.labels[h])))
            wr.writerow(row)


def load_dataset_csv(path: str | Path, labelled: bool = True) -> Dataset:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    if labelled:
        x = np.array([[float(v) for v in r[:-1]] for r in rows])
        y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
        return Dataset(x, y)
    return Dataset(np.array([[float(v) for v in r] for r in rows]))
