import logging
from typing import Protocol, runtime_checkable

import numpy as np

from tape import ops, value_of

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)


class NetworkShapeError(ValueError):
    pass


@runtime_checkable
class ValueFunction(Protocol):
    """What the Hamiltonian needs from a value function."""

    theta: np.ndarray

    @property
    def num_params(self) -> int: ...

    def eval_phi(self, theta, t: float, z): ...

    def grad_z_phi(self, theta, t: float, z): ...


def default_widths(n_state: int, hidden=DEFAULT_HIDDEN) -> list[int]:
    return [1 + n_state, *hidden, 1]


def param_count(widths) -> int:
    return int(sum((w_in + 1) * w_out for w_in, w_out in zip(widths[:-1], widths[1:])))


def init_params(widths, seed: int) -> np.ndarray:
    """Fan-based symmetric uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (w_in + w_out))
        chunks.append(rng.uniform(-bound, bound, size=w_out * w_in))
        chunks.append(np.zeros(w_out))
    return np.concatenate(chunks)


class ValueNetwork:
    """tanh MLP for phi(t, z) with a linear scalar output."""

    def __init__(self, n_state: int, widths=None, seed: int = 0, theta=None):
        widths = list(widths) if widths is not None else default_widths(n_state)
        if len(widths) < 2:
            raise NetworkShapeError("a network needs at least input and output widths")
        if widths[0] != 1 + n_state:
            raise NetworkShapeError(f"input width must be 1 + n = {1 + n_state}, got {widths[0]}")
        if widths[-1] != 1:
            raise NetworkShapeError(f"output width must be 1, got {widths[-1]}")
        if any(w < 1 for w in widths):
            raise NetworkShapeError(f"widths must be positive: {widths}")

        self.n_state = n_state
        self.widths = widths
        self.seed = seed
        if theta is None:
            theta = init_params(widths, seed)
        self.theta = self._check_theta(theta)

    @property
    def num_params(self) -> int:
        return param_count(self.widths)

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise NetworkShapeError(f"theta must have shape ({self.num_params},), got {theta.shape}")
        return theta

    def set_theta(self, theta):
        self.theta = self._check_theta(theta)

    def copy(self) -> "ValueNetwork":
        return ValueNetwork(self.n_state, self.widths, self.seed, self.theta.copy())

    def unflatten(self, theta):
        """Split theta (array or node) into per-layer (W, b), W of shape (out, in)."""
        layers = []
        offset = 0
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            size = w_in * w_out
            W = ops.reshape(theta[offset:offset + size], (w_out, w_in))
            offset += size
            b = theta[offset:offset + w_out]
            offset += w_out
            layers.append((W, b))
        return layers

    @staticmethod
    def flatten(layers) -> np.ndarray:
        return np.concatenate([np.concatenate([value_of(W).ravel(), value_of(b)]) for W, b in layers])

    def _inputs(self, t, z):
        if value_of(z).shape != (self.n_state,):
            raise NetworkShapeError(f"state must have shape ({self.n_state},), got {value_of(z).shape}")
        return ops.concat([np.array([float(t)]), z])

    def _hidden(self, layers, x):
        activations = []
        a = x
        for W, b in layers[:-1]:
            a = ops.tanh(W @ a + b)
            activations.append(a)
        return activations

    def eval_phi(self, theta, t: float, z):
        layers = self.unflatten(theta)
        x = self._inputs(t, z)
        activations = self._hidden(layers, x)
        W, b = layers[-1]
        last = activations[-1] if activations else x
        return (W @ last + b)[0]

    def grad_z_phi(self, theta, t: float, z):
        """Analytic input gradient, written in tape primitives.

        Recording it keeps every weight on the tape, so a later sweep gives
        contractions of d(grad_z phi)/d theta.
        """
        layers = self.unflatten(theta)
        x = self._inputs(t, z)
        activations = self._hidden(layers, x)
        g = np.ones(1) @ layers[-1][0]
        for (W, _), a in zip(reversed(layers[:-1]), reversed(activations)):
            g = (g * (1.0 - a * a)) @ W
        return g[1:]

    def reference_phi(self, t: float, z) -> float:
        """Straight numpy forward pass, independent of the tape primitives."""
        theta = self.theta
        a = np.concatenate([[float(t)], np.asarray(z, dtype=np.float64)])
        offset = 0
        pairs = list(zip(self.widths[:-1], self.widths[1:]))
        for i, (w_in, w_out) in enumerate(pairs):
            W = theta[offset:offset + w_in * w_out].reshape(w_out, w_in)
            offset += w_in * w_out
            b = theta[offset:offset + w_out]
            offset += w_out
            a = W @ a + b
            if i < len(pairs) - 1:
                a = np.tanh(a)
        return float(a[0])

    def save(self, path, config_hash: str = ""):
        write_checkpoint(path, self.widths, self.seed, self.theta, config_hash)

    @classmethod
    def load(cls, path, n_state: int | None = None, config_hash: str | None = None) -> "ValueNetwork":
        """Read a checkpoint; with `config_hash` the stored hash must match it."""
        checkpoint = read_checkpoint(path)
        if config_hash is not None:
            if not checkpoint.config_hash:
                logger.warning("%s records no config hash; cannot verify it belongs to %s", path, config_hash[:12])
            elif checkpoint.config_hash != config_hash:
                raise CheckpointError(
                    f"{path} was written under config {checkpoint.config_hash[:12]}, not {config_hash[:12]}"
                )
        widths, seed, theta = checkpoint.widths, checkpoint.seed, checkpoint.theta
        inferred = widths[0] - 1
        if n_state is not None and n_state != inferred:
            raise NetworkShapeError(
                f"checkpoint expects a {inferred}-dimensional state, problem has {n_state}"
            )
        return cls(inferred, widths, seed, theta)

    def __repr__(self):
        return f"ValueNetwork(widths={self.widths}, p={self.num_params})"
