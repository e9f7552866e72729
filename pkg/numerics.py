"""
Dense numerics for the imputation models
MLP forward/backward (recompute-on-backward), first-order optimizers and a
central-difference gradient checker. All arrays are float64.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
HIDDEN_ACTIVATIONS = ('relu', 'silu')
OUTPUT_ACTIVATIONS = ('identity', 'sigmoid')
OPTIMIZER_KINDS = ('adam', 'sgd')


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up"""


class NonFiniteGradientError(ValueError):
    """Raised when an optimizer receives NaN/inf gradients"""


def as_tensor(values, name: str = 'tensor') -> np.ndarray:
    """
    Convert input to a float64 array and check the Tensor invariants

    Args:
        values: Array-like input
        name: Name used in error messages

    Returns:
        float64 ndarray
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != int(np.prod(arr.shape)):
        raise ShapeError(f"{name}: size {arr.size} does not match shape {arr.shape}")
    return arr


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function"""
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function with logits clamped to [-30, 30]"""
    return stable_sigmoid(np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP))


def _hidden(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'relu':
        return np.maximum(z, 0.0)
    return z * stable_sigmoid(z)


def _hidden_derivative(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'relu':
        return (z > 0.0).astype(np.float64)
    s = stable_sigmoid(z)
    return s + z * s * (1.0 - s)


class Mlp:
    """Fully connected network y = act(x @ W + b) layer by layer"""

    def __init__(self, layer_dims: Sequence[int], weights: List[np.ndarray], biases: List[np.ndarray],
                 hidden_activation: str = 'silu', output_activation: str = 'identity'):
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"Unknown hidden activation: {hidden_activation}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"Unknown output activation: {output_activation}")
        if len(layer_dims) < 2:
            raise ShapeError("An Mlp needs at least an input and an output width")

        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = [as_tensor(w, f"weights[{i}]") for i, w in enumerate(weights)]
        self.biases = [as_tensor(b, f"biases[{i}]") for i, b in enumerate(biases)]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self._validate()

    def _validate(self) -> None:
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError(f"Expected {n_layers} weight/bias pairs, got "
                             f"{len(self.weights)}/{len(self.biases)}")
        for i in range(n_layers):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if self.weights[i].shape != expected:
                raise ShapeError(f"Layer {i} weights have shape {self.weights[i].shape}, expected {expected}")
            if self.biases[i].shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"Layer {i} bias has shape {self.biases[i].shape}, "
                                 f"expected ({self.layer_dims[i + 1]},)")

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], hidden_activation: str = 'silu',
                   output_activation: str = 'identity', rng: Optional[np.random.Generator] = None,
                   scheme: str = 'xavier') -> 'Mlp':
        """
        Build a network with freshly initialized parameters

        Args:
            layer_dims: Widths from input to output
            hidden_activation: 'relu' or 'silu'
            output_activation: 'identity' or 'sigmoid'
            rng: Random generator (required unless scheme is 'zeros')
            scheme: 'xavier' (uniform Glorot weights, zero biases) or 'zeros'

        Returns:
            New Mlp
        """
        weights, biases = [], []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            if scheme == 'zeros':
                weights.append(np.zeros((d_in, d_out)))
            elif scheme == 'xavier':
                if rng is None:
                    raise ValueError("xavier initialization needs a random generator")
                limit = np.sqrt(6.0 / (d_in + d_out))
                weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
            else:
                raise ValueError(f"Unknown initialization scheme: {scheme}")
            biases.append(np.zeros(d_out))
        return cls(layer_dims, weights, biases, hidden_activation, output_activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameter_count(self) -> int:
        return sum(d_in * d_out + d_out for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def parameters(self) -> List[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def copy(self) -> 'Mlp':
        return Mlp(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.hidden_activation, self.output_activation)

    def flat_parameters(self) -> np.ndarray:
        """All parameters concatenated in parameters() order"""
        return np.concatenate([p.reshape(-1) for p in self.parameters()])

    def with_flat_parameters(self, flat: np.ndarray) -> 'Mlp':
        """Copy of this network with parameters read from a flat vector"""
        flat = as_tensor(flat, 'flat parameters')
        if flat.size != self.parameter_count():
            raise ShapeError(f"Expected {self.parameter_count()} parameters, got {flat.size}")
        net = self.copy()
        offset = 0
        for p in net.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        return net

    def equals(self, other: 'Mlp') -> bool:
        """Bitwise parameter equality"""
        if self.layer_dims != other.layer_dims:
            return False
        return all(np.array_equal(p, q) for p, q in zip(self.parameters(), other.parameters()))

    def __repr__(self) -> str:
        return (f"Mlp(layer_dims={self.layer_dims}, hidden={self.hidden_activation}, "
                f"output={self.output_activation})")


class Gradients:
    """Per-parameter gradients mirroring an Mlp, plus an optional input gradient"""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray],
                 input_grad: Optional[np.ndarray] = None):
        self.weights = weights
        self.biases = biases
        self.input_grad = input_grad

    @classmethod
    def zeros_like(cls, net: Mlp) -> 'Gradients':
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def parameters(self) -> List[np.ndarray]:
        grads = []
        for w, b in zip(self.weights, self.biases):
            grads.extend([w, b])
        return grads

    def mirrors(self, net: Mlp) -> bool:
        return all(g.shape == p.shape for g, p in zip(self.parameters(), net.parameters())) and \
            len(self.weights) == net.n_layers

    def flat(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.parameters()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.parameters())))


def _check_input(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = as_tensor(x, 'input')
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"Input last dimension {x.shape[-1] if x.ndim else 0} "
                         f"does not match network input width {net.input_dim}")
    return x, squeeze


def _forward_trace(net: Mlp, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Pre-activations and activations of every layer; activations[0] is the input"""
    pre_acts, acts = [], [x]
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre_acts.append(z)
        if i < last:
            h = _hidden(z, net.hidden_activation)
        elif net.output_activation == 'sigmoid':
            h = sigmoid(z)
        else:
            h = z
        acts.append(h)
    return pre_acts, acts


def _backward_from_trace(net: Mlp, pre_acts: List[np.ndarray], acts: List[np.ndarray],
                         upstream: np.ndarray, wrt_logits: bool = False, input_only: bool = False) -> Gradients:
    z_out = pre_acts[-1]
    if net.output_activation == 'sigmoid':
        inside = (np.abs(z_out) <= LOGIT_CLAMP).astype(np.float64)
        if wrt_logits:
            delta = upstream * inside
        else:
            s = acts[-1]
            delta = upstream * s * (1.0 - s) * inside
    else:
        delta = upstream

    grad_w: List[Optional[np.ndarray]] = [None] * net.n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * net.n_layers
    dx = delta
    for i in range(net.n_layers - 1, -1, -1):
        if not input_only:
            grad_w[i] = acts[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
        dx = delta @ net.weights[i].T
        if i > 0:
            delta = dx * _hidden_derivative(pre_acts[i - 1], net.hidden_activation)
    if input_only:
        return Gradients([], [], dx)
    return Gradients(grad_w, grad_b, dx)


class ForwardTrace:
    """Pre-activations and activations of one forward pass, reusable by mlp_backward"""

    def __init__(self, inputs: np.ndarray, pre_acts: List[np.ndarray], acts: List[np.ndarray]):
        self.inputs = inputs
        self.pre_acts = pre_acts
        self.acts = acts

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.pre_acts[-1]


def mlp_trace(net: Mlp, x: np.ndarray) -> ForwardTrace:
    """Forward pass on a 2-D batch keeping every intermediate"""
    x, squeeze = _check_input(net, x)
    if squeeze:
        raise ShapeError("mlp_trace expects a 2-D batch")
    pre_acts, acts = _forward_trace(net, x)
    return ForwardTrace(x, pre_acts, acts)


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """
    Deterministic forward pass

    Args:
        net: Network
        x: [N, d_in] or [d_in] array

    Returns:
        Output with the output activation applied
    """
    x, squeeze = _check_input(net, x)
    _, acts = _forward_trace(net, x)
    out = acts[-1]
    return out[0] if squeeze else out


def mlp_logits(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Final pre-activation, before the output activation"""
    x, squeeze = _check_input(net, x)
    pre_acts, _ = _forward_trace(net, x)
    out = pre_acts[-1]
    return out[0] if squeeze else out


def mlp_backward(net: Mlp, x: np.ndarray, upstream_grad: np.ndarray, wrt_logits: bool = False,
                 input_only: bool = False, trace: Optional[ForwardTrace] = None) -> Gradients:
    """
    Reverse-mode gradients of sum(upstream_grad * output)

    The forward intermediates are recomputed unless a trace of the same
    input is given. With wrt_logits=True the upstream gradient is taken to
    be with respect to the (clamped) final pre-activation instead of the
    sigmoid output.

    Args:
        net: Network
        x: Input the objective was evaluated at
        upstream_grad: d objective / d output, same shape as the output
        wrt_logits: Treat upstream as d objective / d logits
        input_only: Skip parameter gradients (the result then has empty weight/bias lists)
        trace: Forward trace of x from mlp_trace

    Returns:
        Parameter gradients and input gradient
    """
    if trace is not None:
        upstream = as_tensor(upstream_grad, 'upstream_grad')
        if upstream.shape != trace.output.shape:
            raise ShapeError(f"Upstream gradient shape {upstream.shape} does not match output "
                             f"shape {trace.output.shape}")
        return _backward_from_trace(net, trace.pre_acts, trace.acts, upstream, wrt_logits, input_only)

    x, squeeze = _check_input(net, x)
    upstream = as_tensor(upstream_grad, 'upstream_grad')
    if squeeze and upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != (x.shape[0], net.output_dim):
        raise ShapeError(f"Upstream gradient shape {upstream.shape} does not match output "
                         f"shape {(x.shape[0], net.output_dim)}")
    pre_acts, acts = _forward_trace(net, x)
    grads = _backward_from_trace(net, pre_acts, acts, upstream, wrt_logits, input_only)
    if squeeze:
        grads.input_grad = grads.input_grad[0]
    return grads


class OptimizerState:
    """Moment buffers and step counter for one network"""

    def __init__(self, net: Mlp, kind: str = 'adam', beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if kind not in OPTIMIZER_KINDS:
            raise ValueError(f"Unknown optimizer: {kind}")
        self.kind = kind
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first_moment = [np.zeros_like(p) for p in net.parameters()]
        self.second_moment = [np.zeros_like(p) for p in net.parameters()]

    def __repr__(self) -> str:
        return f"OptimizerState(kind={self.kind}, step={self.step})"


def _layer_name(index: int) -> str:
    return f"layer {index // 2} {'weights' if index % 2 == 0 else 'bias'}"


def optimizer_step(net: Mlp, grads: Gradients, state: OptimizerState, lr: float) -> Tuple[Mlp, OptimizerState]:
    """
    Apply one optimizer update in place

    Args:
        net: Network to update
        grads: Gradients mirroring net
        state: Optimizer state for net
        lr: Learning rate

    Returns:
        The updated (same) network and state
    """
    if not grads.mirrors(net):
        raise ShapeError("Gradients do not mirror the network parameters")

    grad_list = grads.parameters()
    for i, g in enumerate(grad_list):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"Non-finite gradient in {_layer_name(i)}")

    state.step += 1
    params = net.parameters()
    if state.kind == 'sgd':
        for p, g in zip(params, grad_list):
            p -= lr * g
        return net, state

    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grad_list, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return net, state


class GradientCheck:
    """Result of a finite-difference comparison"""

    def __init__(self, max_relative_error: float, nan_coordinates: List[Tuple[int, ...]]):
        self.max_relative_error = max_relative_error
        self.nan_coordinates = nan_coordinates

    def __float__(self) -> float:
        return self.max_relative_error

    def __repr__(self) -> str:
        return f"GradientCheck(max_relative_error={self.max_relative_error:.3e}, nan={len(self.nan_coordinates)})"


def finite_diff_check(objective: Callable[[np.ndarray], Tuple[float, np.ndarray]], point: np.ndarray,
                      h: float = 1e-5) -> GradientCheck:
    """
    Compare an analytic gradient against central differences

    Args:
        objective: Maps a point to (value, analytic gradient)
        point: Where to evaluate
        h: Finite-difference step

    Returns:
        GradientCheck with max |analytic - numeric| / max(1, |analytic|)
    """
    point = as_tensor(point, 'point').copy()
    _, analytic = objective(point)
    analytic = as_tensor(analytic, 'analytic gradient')
    if analytic.shape != point.shape:
        raise ShapeError(f"Analytic gradient shape {analytic.shape} does not match point {point.shape}")

    errors = np.zeros(point.shape)
    for idx in np.ndindex(*point.shape):
        original = point[idx]
        point[idx] = original + h
        f_plus, _ = objective(point)
        point[idx] = original - h
        f_minus, _ = objective(point)
        point[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        errors[idx] = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))

    nan_coordinates = [tuple(int(i) for i in idx) for idx in np.argwhere(np.isnan(errors))]
    if nan_coordinates:
        logger.warning(f"[GRADCHECK] {len(nan_coordinates)} coordinates produced NaN")
        return GradientCheck(float('nan'), nan_coordinates)
    return GradientCheck(float(np.max(errors)) if errors.size else 0.0, nan_coordinates)
