"""Dense networks with hand-written reverse mode, a diagonal Gaussian policy and Adam.

Parameters live in one flat float64 array per network; layer weights and
biases are views into it, so optimizers and checkpoints deal with a single
vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, TapeConsumed

HIDDEN = (256, 128, 64)
CHECKPOINT_VERSION = 1
LOG_2PI = np.log(2.0 * np.pi)


def elu(x):
    x = np.asarray(x, dtype=float)
    # branch-free: exactly x for x > 0 and expm1(x) otherwise
    return np.maximum(x, 0.0) + np.expm1(np.minimum(x, 0.0))


def elu_grad(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _elu_grad_from_output(h):
    # derivative is 1 above zero and exp(x) = elu(x) + 1 below
    return np.minimum(h, 0.0) + 1.0


def orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


@dataclass(eq=False)
class MlpParams:
    """Weights of an MLP with ELU hidden layers and a linear output."""

    sizes: tuple
    theta: np.ndarray

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ShapeMismatch("an MLP needs at least input and output sizes")
        n = self.count(self.sizes)
        if self.theta.shape != (n,):
            raise ShapeMismatch(f"expected {n} parameters for sizes {self.sizes}, got {self.theta.shape}")

    @staticmethod
    def count(sizes) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @classmethod
    def zeros(cls, sizes) -> "MlpParams":
        return cls(tuple(sizes), np.zeros(cls.count(tuple(sizes))))

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, out_gain: float = 1.0,
             hidden_gain: float = np.sqrt(2.0)) -> "MlpParams":
        p = cls.zeros(sizes)
        layers = p.layers()
        for k, (W, b) in enumerate(layers):
            gain = out_gain if k == len(layers) - 1 else hidden_gain
            W[...] = orthogonal(W.shape[0], W.shape[1], gain, rng)
        return p

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views with W shaped (fan_in, fan_out)."""
        out, i = [], 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.theta[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((W, self.theta[i:i + b]))
            i += b
        return out

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]


@dataclass(eq=False)
class GradTape:
    """Activations of one forward pass; consumed by a single ``backward``."""

    params: MlpParams
    inputs: list        # input to every layer
    hidden: list        # post-activation output of every hidden layer
    batched: bool
    consumed: bool = False


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != params.n_in:
        raise ShapeMismatch(f"input of shape {x.shape} does not fit an MLP with {params.n_in} inputs")
    inputs = []
    layers = params.layers()
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if k < len(layers) - 1:
            h = elu(z)
        else:
            h = z
    return (h if batched else h[0]), GradTape(params, inputs, inputs[1:], batched)


def backward(tape: GradTape, output_grad, input_grad: bool = False):
    """Gradient of ``sum(output * output_grad)`` with respect to the flat parameters.

    With ``input_grad`` the gradient with respect to the input is returned too.
    """
    if tape.consumed:
        raise TapeConsumed("tape was already used for a backward pass")
    tape.consumed = True
    g = np.asarray(output_grad, dtype=float)
    if not tape.batched:
        g = g[None, :]
    grad = np.zeros_like(tape.params.theta)
    views = MlpParams(tape.params.sizes, grad).layers()
    layers = tape.params.layers()
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gW, gb = views[k]
        gW[...] = tape.inputs[k].T @ g
        gb[...] = g.sum(axis=0)
        g = g @ W.T
        if k > 0:
            g = g * _elu_grad_from_output(tape.hidden[k - 1])
    if input_grad:
        return grad, (g if tape.batched else g[0])
    return grad


# -- policy and value -------------------------------------------------------------

@dataclass(eq=False)
class GaussianPolicy:
    """MLP mean and a state-independent diagonal log standard deviation."""

    sizes: tuple
    theta: np.ndarray   # mean-net parameters followed by log_sigma

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        n = MlpParams.count(self.sizes) + self.sizes[-1]
        if self.theta.shape != (n,):
            raise ShapeMismatch(f"expected {n} policy parameters, got {self.theta.shape}")

    @classmethod
    def init(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, hidden=HIDDEN,
             log_sigma: float = 0.0) -> "GaussianPolicy":
        net = MlpParams.init((obs_dim, *hidden, act_dim), rng, out_gain=0.01)
        return cls(net.sizes, np.concatenate([net.theta, np.full(act_dim, float(log_sigma))]))

    @property
    def mean_net(self) -> MlpParams:
        return MlpParams(self.sizes, self.theta[:MlpParams.count(self.sizes)])

    @property
    def log_sigma(self) -> np.ndarray:
        return self.theta[MlpParams.count(self.sizes):]

    @property
    def act_dim(self) -> int:
        return self.sizes[-1]

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.mean_net, obs)[0]

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.sizes, self.theta.copy())


@dataclass(eq=False)
class ValueNet:
    sizes: tuple
    theta: np.ndarray

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.sizes[-1] != 1:
            raise ShapeMismatch("a value network has exactly one output")
        MlpParams(self.sizes, self.theta)

    @classmethod
    def init(cls, obs_dim: int, rng: np.random.Generator, hidden=HIDDEN) -> "ValueNet":
        net = MlpParams.init((obs_dim, *hidden, 1), rng, out_gain=1.0)
        return cls(net.sizes, net.theta)

    @property
    def net(self) -> MlpParams:
        return MlpParams(self.sizes, self.theta)

    def __call__(self, obs) -> np.ndarray:
        return mlp_forward(self.net, obs)[0][..., 0]

    def copy(self) -> "ValueNet":
        return ValueNet(self.sizes, self.theta.copy())


def gaussian_log_prob(action, mu, log_sigma):
    z = (np.asarray(action) - mu) * np.exp(-log_sigma)
    return -0.5 * np.sum(z * z + 2.0 * log_sigma + LOG_2PI, axis=-1)


def gaussian_entropy(log_sigma):
    return np.sum(log_sigma + 0.5 * (1.0 + LOG_2PI), axis=-1)


def sample_action(policy: GaussianPolicy, obs, rng: np.random.Generator):
    """Draw ``mu + sigma * eps`` and return it with its log density."""
    mu = policy.mean(obs)
    ls = policy.log_sigma
    action = mu + np.exp(ls) * rng.standard_normal(mu.shape)
    return action, gaussian_log_prob(action, mu, ls)


# -- optimizer ----------------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_update(params: np.ndarray, grads: np.ndarray, lr: float, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam step. Updates ``state`` in place and returns new parameters."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays plus JSON metadata to an ``.npz`` file."""
    header = {"version": CHECKPOINT_VERSION, "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
              "meta": meta or {}}
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k[2:]: data[k].copy() for k in data.files if k.startswith("a/")}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ShapeMismatch(f"array {k!r} has shape {arrays[k].shape}, header says {shape}")
    return arrays, header["meta"]
