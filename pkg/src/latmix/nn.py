"""Dense feed-forward networks with explicit forward/backward passes and Adam.

All networks are plain multilayer perceptrons with tanh on hidden layers and
an identity output layer. Parameters are immutable value objects; every
update produces fresh arrays, so evaluation is safe from concurrent workers.
All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a dense network.

    ``weights[k]`` has shape (out_k, in_k) and ``biases[k]`` shape (out_k,);
    consecutive layer dimensions chain. Hidden layers use tanh, the output
    layer is linear.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must pair up layer by layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k}: in-dim {w.shape[1]} does not chain")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError(f"layer {k}: non-finite parameter entries")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (weights then bias per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @staticmethod
    def from_arrays(arrays: list[np.ndarray]) -> "MlpParams":
        ws = tuple(arrays[0::2])
        bs = tuple(arrays[1::2])
        return MlpParams(ws, bs)


@dataclass(frozen=True)
class GradientBundle:
    """Per-parameter gradients with the same structure as :class:`MlpParams`."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass(frozen=True)
class Tape:
    """Activations recorded by :func:`mlp_forward`, consumed by :func:`mlp_backward`."""

    inputs: tuple[np.ndarray, ...]  # input to each layer, batch-major
    params_token: tuple
    batched: bool


def init_mlp(sizes, rng: np.random.Generator) -> MlpParams:
    """Initialize a network with layer widths ``sizes`` (input first).

    Weights are uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), biases
    zero, which keeps tanh pre-activations in their linear range at the start.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ShapeError("need at least an input and an output width")
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        ws.append(rng.uniform(-a, a, size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    return MlpParams(tuple(ws), tuple(bs))


def _params_token(params: MlpParams) -> tuple:
    return (id(params),) + tuple(w.shape for w in params.weights)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the network and record a tape for the backward pass.

    ``x`` may be a single input vector or a (batch, n_in) matrix; the output
    matches. Raises :class:`ShapeError` on width mismatch and
    :class:`ValidationError` on non-finite inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != params.n_in:
        raise ShapeError(f"input width {x.shape} incompatible with first layer in-dim {params.n_in}")
    if not np.isfinite(h).all():
        raise ValidationError("non-finite network input")
    inputs = []
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w.T + b
        h = a if k == last else np.tanh(a)
    tape = Tape(tuple(inputs), _params_token(params), batched)
    return (h if batched else h[0]), tape


def mlp_backward(params: MlpParams, tape: Tape, grad_output: np.ndarray) -> tuple[GradientBundle, np.ndarray]:
    """Reverse-mode gradients of <output, grad_output> w.r.t. parameters and input.

    The tape must come from :func:`mlp_forward` on the same params object.
    Batched grad_output accumulates parameter gradients over the batch while
    the returned input gradient stays per-row.
    """
    if tape.params_token != _params_token(params):
        raise ValidationError("tape does not belong to these parameters")
    g = np.asarray(grad_output, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if g.shape != (tape.inputs[0].shape[0], params.n_out):
        raise ShapeError(f"grad_output shape {grad_output.shape} does not match network output")
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        if k < params.n_layers - 1:
            # tanh layer: its post-activation equals the input of layer k+1
            h = tape.inputs[k + 1]
            g = g * (1.0 - h * h)
        gw[k] = g.T @ tape.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    grad_input = g if tape.batched else g[0]
    return GradientBundle(tuple(gw), tuple(gb)), grad_input


@dataclass(frozen=True)
class AdamState:
    """Adam accumulators; shapes mirror the parameter arrays they update."""

    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(arrays, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Fresh zeroed state for a list of parameter arrays (or an MlpParams)."""
    if isinstance(arrays, MlpParams):
        arrays = arrays.arrays()
    zeros = tuple(np.zeros_like(a) for a in arrays)
    return AdamState(zeros, tuple(np.zeros_like(a) for a in arrays), 0, lr, beta1, beta2, eps)


def adam_step_arrays(state: AdamState, arrays: list[np.ndarray], grads: list[np.ndarray]) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update over a flat list of arrays."""
    if len(arrays) != len(state.m) or len(grads) != len(arrays):
        raise ShapeError("array count does not match optimizer state")
    t = state.step + 1
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if a.shape != g.shape or a.shape != m.shape:
            raise ShapeError(f"shape mismatch in Adam update: {a.shape} vs {g.shape}")
        m1 = state.beta1 * m + (1.0 - state.beta1) * g
        v1 = state.beta2 * v + (1.0 - state.beta2) * g * g
        mhat = m1 / (1.0 - state.beta1 ** t)
        vhat = v1 / (1.0 - state.beta2 ** t)
        new_arrays.append(a - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m1)
        new_v.append(v1)
    new_state = AdamState(tuple(new_m), tuple(new_v), t, state.lr, state.beta1, state.beta2, state.eps)
    return new_arrays, new_state


def adam_step(state: AdamState, params: MlpParams, grads: GradientBundle) -> tuple[MlpParams, AdamState]:
    """Adam update specialized to a single network."""
    arrays, new_state = adam_step_arrays(state, params.arrays(), grads.arrays())
    return MlpParams.from_arrays(arrays), new_state


def finite_diff_arrays(f, arrays: list[np.ndarray], step: float) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of a list of arrays."""
    if step <= 0:
        raise ValidationError("finite-difference step must be positive")
    grads = []
    for idx, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f(arrays)
            flat[j] = orig - step
            fm = f(arrays)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValidationError("non-finite function value during finite differencing")
            gflat[j] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def finite_diff_grad(f, params: MlpParams, step: float) -> GradientBundle:
    """Central-difference gradient of a scalar function of network parameters.

    Used as the independent oracle for :func:`mlp_backward`; ``f`` must be
    pure and finite near ``params``.
    """
    arrays = [a.copy() for a in params.arrays()]

    def wrapped(arrs):
        return f(MlpParams.from_arrays(arrs))

    grads = finite_diff_arrays(wrapped, arrays, step)
    return GradientBundle(tuple(grads[0::2]), tuple(grads[1::2]))
