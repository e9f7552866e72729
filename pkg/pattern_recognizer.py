"""
Pattern recognizer
Predicts, for every entry of a completed row, the probability that it was
observed. Its input gradient is the guidance signal of the E step.
"""

import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from numerics import LOGIT_CLAMP, Mlp, OptimizerState, ShapeError, as_tensor, mlp_backward, mlp_forward, \
    mlp_logits, mlp_trace, optimizer_step, stable_sigmoid

logger = logging.getLogger(__name__)

MAX_HIDDEN_WIDTH = 512
REDUCTIONS = ('mean', 'row_mean')


class PatternRecognizer:
    """Mlp with sigmoid output mapping x0 [D] to observation probabilities [D]"""

    def __init__(self, net: Mlp):
        if net.input_dim != net.output_dim:
            raise ShapeError(f"Recognizer must map D to D, got {net.input_dim} -> {net.output_dim}")
        if net.output_activation != 'sigmoid':
            raise ValueError("Recognizer output activation must be sigmoid")
        self.net = net

    @property
    def data_dim(self) -> int:
        return self.net.input_dim

    @classmethod
    def initialize(cls, data_dim: int, hidden_width: Optional[int] = None, hidden_layers: int = 3,
                   activation: str = 'silu', rng: Optional[np.random.Generator] = None,
                   scheme: str = 'xavier') -> 'PatternRecognizer':
        """
        Build a recognizer

        Args:
            data_dim: D
            hidden_width: Hidden width (min(512, 8D) when None)
            hidden_layers: Number of hidden layers
            activation: Hidden activation
            rng: Random generator
            scheme: 'xavier' or 'zeros' (zeros gives a constant 0.5 output)

        Returns:
            PatternRecognizer
        """
        width = hidden_width or min(MAX_HIDDEN_WIDTH, 8 * data_dim)
        dims = [data_dim] + [width] * hidden_layers + [data_dim]
        return cls(Mlp.initialize(dims, activation, 'sigmoid', rng, scheme))

    @classmethod
    def from_config(cls, data_dim: int, section: Dict[str, Any],
                    rng: Optional[np.random.Generator] = None) -> 'PatternRecognizer':
        """Build from the 'recognizer' config section"""
        return cls.initialize(data_dim, section.get('hidden_width'), int(section.get('hidden_layers', 3)),
                              section.get('activation', 'silu'), rng, section.get('init', 'xavier'))

    def copy(self) -> 'PatternRecognizer':
        return PatternRecognizer(self.net.copy())

    def __repr__(self) -> str:
        return f"PatternRecognizer(D={self.data_dim}, net={self.net})"


def _inputs(pr: PatternRecognizer, m: np.ndarray, x0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x0 = as_tensor(x0, 'x0')
    m = as_tensor(m, 'm')
    if x0.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match x0 shape {x0.shape}")
    if x0.shape[-1] != pr.data_dim:
        raise ShapeError(f"x0 has {x0.shape[-1]} features, recognizer expects {pr.data_dim}")
    return (x0[None, :], m[None, :]) if x0.ndim == 1 else (x0, m)


def pr_predict(pr: PatternRecognizer, x0: np.ndarray) -> np.ndarray:
    """Observation probabilities in (0, 1)"""
    return mlp_forward(pr.net, x0)


def pr_loss(m: np.ndarray, x0: np.ndarray, pr: PatternRecognizer) -> float:
    """
    Mean binary cross-entropy of the recognizer against the mask

    Args:
        m: Observation mask (labels)
        x0: Completed data
        pr: Recognizer

    Returns:
        Mean per-entry BCE
    """
    x0, m = _inputs(pr, m, x0)
    z = np.clip(mlp_logits(pr.net, x0), -LOGIT_CLAMP, LOGIT_CLAMP)
    return float(np.mean(np.logaddexp(0.0, z) - m * z))


def _logit_grad(m: np.ndarray, logits: np.ndarray) -> np.ndarray:
    z = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return (stable_sigmoid(z) - m) / m.size


def pr_input_grad(m: np.ndarray, x0: np.ndarray, pr: PatternRecognizer, reduction: str = 'mean') -> np.ndarray:
    """
    Gradient of the recognizer loss with respect to x0

    Args:
        m: Observation mask
        x0: Completed data
        pr: Recognizer
        reduction: 'mean' differentiates pr_loss; 'row_mean' differentiates
            the sum of per-row mean losses, so each row's gradient is
            independent of the batch size

    Returns:
        Gradient with the shape of x0
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"Unknown reduction: {reduction}")
    squeeze = np.ndim(x0) == 1
    x0, m = _inputs(pr, m, x0)
    trace = mlp_trace(pr.net, x0)
    upstream = _logit_grad(m, trace.logits)
    if reduction == 'row_mean':
        upstream = upstream * x0.shape[0]
    grad = mlp_backward(pr.net, x0, upstream, wrt_logits=True, input_only=True, trace=trace).input_grad
    return grad[0] if squeeze else grad


def pr_train_step(pr: PatternRecognizer, m: np.ndarray, x0: np.ndarray, lr: float,
                  opt_state: OptimizerState) -> Tuple[PatternRecognizer, float]:
    """
    One optimizer step on pr_loss

    Returns:
        (updated recognizer, loss before the step)
    """
    x0, m = _inputs(pr, m, x0)
    trace = mlp_trace(pr.net, x0)
    z = np.clip(trace.logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = float(np.mean(np.logaddexp(0.0, z) - m * z))
    grads = mlp_backward(pr.net, x0, _logit_grad(m, trace.logits), wrt_logits=True, trace=trace)
    optimizer_step(pr.net, grads, opt_state, lr)
    return pr, loss
