"""
Conditional diffusion backbone
Noise schedule, closed-form forward corruption, the X0-prediction denoiser,
its masked regression loss, Phase-1 pre-training and the reverse sampler
shared by the unguided and guided E steps.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from data_loader import DatasetError, MaskedDataset
from missing_mechanisms import generate_artificial
from numerics import Gradients, Mlp, OptimizerState, ShapeError, as_tensor, mlp_backward, mlp_forward, \
    mlp_trace, optimizer_step

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ('quadratic', 'linear')

Timesteps = Union[int, np.ndarray]
# vjp(upstream) -> gradient of sum(upstream * x0_hat) with respect to x_t
DenoiserVjp = Callable[[np.ndarray], np.ndarray]
# guidance(x_t, t, x0_hat, x0_obs, m, vjp) -> amount subtracted from x0_hat
GuidanceFn = Callable[..., np.ndarray]


class ScheduleError(ValueError):
    """Raised for invalid schedule bounds or out-of-range timesteps"""


class NonFiniteImputationError(ValueError):
    """Raised when the reverse chain produces NaN/inf"""

    def __init__(self, t: int, message: str = ''):
        self.t = t
        super().__init__(message or f"Non-finite value in reverse chain at t={t}")


class NoiseSchedule:
    """Per-step variances beta_t and the derived alpha_t, alpha_bar_t (t = 1..T)"""

    def __init__(self, beta: np.ndarray, kind: str = 'quadratic'):
        self.beta = np.asarray(beta, dtype=np.float64)
        self.kind = kind
        self.T = int(self.beta.size)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    def alpha_bar_at(self, t: Timesteps) -> Union[float, np.ndarray]:
        """alpha_bar for t in 0..T, with alpha_bar_0 = 1"""
        padded = np.concatenate([[1.0], self.alpha_bar])
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise ScheduleError(f"Timestep out of range 0..{self.T}: {t}")
        value = padded[t_arr]
        return float(value) if value.ndim == 0 else value

    def to_dict(self) -> Dict[str, Any]:
        return {'T': self.T, 'kind': self.kind, 'beta_min': float(self.beta[0]), 'beta_max': float(self.beta[-1])}

    def __repr__(self) -> str:
        return f"NoiseSchedule(T={self.T}, kind={self.kind}, alpha_bar_T={self.alpha_bar[-1]:.4e})"


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.5, kind: str = 'quadratic') -> NoiseSchedule:
    """
    Build a noise schedule

    The quadratic schedule interpolates linearly in sqrt(beta) space and
    squares the result.

    Args:
        T: Number of diffusion steps
        beta_min: First-step variance
        beta_max: Last-step variance
        kind: 'quadratic' or 'linear'

    Returns:
        NoiseSchedule
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"Unknown schedule kind: {kind}")
    if int(T) < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ScheduleError(f"Need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")

    if T == 1:
        beta = np.array([beta_min])
    elif kind == 'quadratic':
        beta = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), T) ** 2
    else:
        beta = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(beta, kind)


def _row_timesteps(t: Timesteps, n_rows: int, sched: NoiseSchedule) -> np.ndarray:
    t_rows = np.broadcast_to(np.asarray(t, dtype=np.int64), (n_rows,)) if np.ndim(t) == 0 \
        else np.asarray(t, dtype=np.int64)
    if t_rows.shape != (n_rows,):
        raise ShapeError(f"Timesteps shape {t_rows.shape} does not match {n_rows} rows")
    if np.any(t_rows < 1) or np.any(t_rows > sched.T):
        raise ScheduleError(f"Timestep out of range 1..{sched.T}")
    return t_rows


def forward_sample(x0: np.ndarray, t: Timesteps, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """
    x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps

    Args:
        x0: Clean data [N x D]
        t: One timestep or one per row
        eps: Standard normal noise, same shape as x0
        sched: Noise schedule

    Returns:
        Noised data x_t
    """
    x0 = as_tensor(x0, 'x0')
    eps = as_tensor(eps, 'eps')
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    if x0.ndim == 1:
        ab = sched.alpha_bar_at(_row_timesteps(t, 1, sched))[0]
    else:
        ab = sched.alpha_bar_at(_row_timesteps(t, x0.shape[0], sched))[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t: Timesteps, embed_dim: int = 64, n_rows: Optional[int] = None) -> np.ndarray:
    """
    Sinusoidal timestep embedding: [sin(t f_k), cos(t f_k)] with
    f_k = 10^(4 k / (half - 1))
    """
    if embed_dim < 2 or embed_dim % 2:
        raise ShapeError(f"embed_dim must be even and >= 2, got {embed_dim}")
    half = embed_dim // 2
    steps = np.asarray(t, dtype=np.float64).reshape(-1)
    if n_rows is not None and steps.size == 1:
        steps = np.repeat(steps, n_rows)
    exponents = np.arange(half) / (half - 1) * 4.0 if half > 1 else np.zeros(1)
    table = steps[:, None] * (10.0 ** exponents)[None, :]
    return np.concatenate([np.sin(table), np.cos(table)], axis=1)


class Denoiser:
    """X0-prediction network over [x_t, x0_obs * cond_mask, cond_mask, embed(t)]"""

    def __init__(self, net: Mlp, data_dim: int, embed_dim: int = 64):
        if net.input_dim != 3 * data_dim + embed_dim:
            raise ShapeError(f"Denoiser input width {net.input_dim} != 3*{data_dim}+{embed_dim}")
        if net.output_dim != data_dim:
            raise ShapeError(f"Denoiser output width {net.output_dim} != {data_dim}")
        if net.output_activation != 'identity':
            raise ValueError("Denoiser output activation must be identity")
        self.net = net
        self.data_dim = int(data_dim)
        self.embed_dim = int(embed_dim)

    @classmethod
    def initialize(cls, data_dim: int, hidden_dims: Sequence[int] = (128, 128), embed_dim: int = 64,
                   activation: str = 'silu', rng: Optional[np.random.Generator] = None,
                   scheme: str = 'xavier') -> 'Denoiser':
        dims = [3 * data_dim + embed_dim, *hidden_dims, data_dim]
        return cls(Mlp.initialize(dims, activation, 'identity', rng, scheme), data_dim, embed_dim)

    def copy(self) -> 'Denoiser':
        return Denoiser(self.net.copy(), self.data_dim, self.embed_dim)

    def __repr__(self) -> str:
        return f"Denoiser(D={self.data_dim}, embed_dim={self.embed_dim}, net={self.net})"


def _denoiser_input(denoiser: Denoiser, x_t: np.ndarray, t_rows: np.ndarray, cond_obs: np.ndarray,
                    cond_mask: np.ndarray) -> np.ndarray:
    for name, arr in (('x_t', x_t), ('cond_obs', cond_obs), ('cond_mask', cond_mask)):
        if arr.ndim != 2 or arr.shape[1] != denoiser.data_dim:
            raise ShapeError(f"{name} shape {arr.shape} does not match D={denoiser.data_dim}")
        if arr.shape[0] != x_t.shape[0]:
            raise ShapeError(f"{name} has {arr.shape[0]} rows, x_t has {x_t.shape[0]}")
    emb = timestep_embedding(t_rows, denoiser.embed_dim)
    return np.concatenate([x_t, cond_obs * cond_mask, cond_mask, emb], axis=1)


def denoise(denoiser: Denoiser, x_t: np.ndarray, t: Timesteps, x0_obs_masked: np.ndarray,
            cond_mask: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """
    Raw network prediction of X0 over every entry

    Args:
        denoiser: Denoiser
        x_t: Noised data [N x D]
        t: Timestep (scalar or per row)
        x0_obs_masked: Observed values, zeros elsewhere
        cond_mask: Conditioning mask
        sched: Schedule the timestep refers to

    Returns:
        x0_hat [N x D]
    """
    x_t = as_tensor(x_t, 'x_t')
    t_rows = _row_timesteps(t, x_t.shape[0], sched)
    inputs = _denoiser_input(denoiser, x_t, t_rows, as_tensor(x0_obs_masked, 'x0_obs'),
                             as_tensor(cond_mask, 'cond_mask'))
    return mlp_forward(denoiser.net, inputs)


def denoiser_input_grad(denoiser: Denoiser, x_t: np.ndarray, t: Timesteps, cond_obs: np.ndarray,
                        cond_mask: np.ndarray, upstream: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Gradient of sum(upstream * denoise(...)) with respect to x_t"""
    t_rows = _row_timesteps(t, x_t.shape[0], sched)
    inputs = _denoiser_input(denoiser, x_t, t_rows, cond_obs, cond_mask)
    grads = mlp_backward(denoiser.net, inputs, upstream, input_only=True)
    return grads.input_grad[:, :denoiser.data_dim]


def _denoise_traced(denoiser: Denoiser, x_t: np.ndarray, t: int, cond_obs: np.ndarray, cond_mask: np.ndarray,
                    sched: NoiseSchedule) -> Tuple[np.ndarray, DenoiserVjp]:
    """denoise() plus a vector-Jacobian product that reuses the same forward pass"""
    t_rows = _row_timesteps(t, x_t.shape[0], sched)
    inputs = _denoiser_input(denoiser, x_t, t_rows, cond_obs, cond_mask)
    trace = mlp_trace(denoiser.net, inputs)

    def vjp(upstream: np.ndarray) -> np.ndarray:
        grads = mlp_backward(denoiser.net, inputs, upstream, input_only=True, trace=trace)
        return grads.input_grad[:, :denoiser.data_dim]

    return trace.output, vjp


class DiffLossConfig:
    """Loss weighting lambda(t); constant 1 by default"""

    def __init__(self, lambda_t: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self.lambda_t = lambda_t or (lambda t: np.ones(np.shape(t)))

    def weights(self, t_rows: np.ndarray) -> np.ndarray:
        w = np.asarray(self.lambda_t(t_rows), dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("lambda(t) must be positive")
        return w


def diff_loss(x0: np.ndarray, target_mask: np.ndarray, x_t: np.ndarray, t: Timesteps, denoiser: Denoiser,
              cond_obs: np.ndarray, cond_mask: np.ndarray, sched: NoiseSchedule,
              cfg: Optional[DiffLossConfig] = None) -> Tuple[float, Gradients]:
    """
    Masked X0 regression loss and its parameter gradients

    loss = sum(lambda(t) ((pred - x0) * target_mask)^2) / max(1, sum(target_mask))

    Returns:
        (loss, Gradients mirroring denoiser.net)
    """
    cfg = cfg or DiffLossConfig()
    x0 = as_tensor(x0, 'x0')
    target_mask = as_tensor(target_mask, 'target_mask')
    if target_mask.shape != x0.shape:
        raise ShapeError(f"target_mask shape {target_mask.shape} does not match x0 {x0.shape}")
    count = float(target_mask.sum())
    if count == 0.0:
        return 0.0, Gradients.zeros_like(denoiser.net)

    t_rows = _row_timesteps(t, x0.shape[0], sched)
    inputs = _denoiser_input(denoiser, as_tensor(x_t, 'x_t'), t_rows, as_tensor(cond_obs, 'cond_obs'),
                             as_tensor(cond_mask, 'cond_mask'))
    pred = mlp_forward(denoiser.net, inputs)
    weight = cfg.weights(t_rows)[:, None]
    residual = (pred - x0) * target_mask
    loss = float(np.sum(weight * residual * residual)) / max(1.0, count)
    upstream = 2.0 * weight * residual / max(1.0, count)
    return loss, mlp_backward(denoiser.net, inputs, upstream)


def pretrain_phase1(train: MaskedDataset, cfg: Dict[str, Any], sched: NoiseSchedule, rng: np.random.Generator,
                    denoiser: Optional[Denoiser] = None) -> Tuple[Denoiser, List[float]]:
    """
    Phase 1: pre-train the conditional denoiser on observed entries

    Each batch hides the artificial entries from the conditioning input and
    regresses X0 on every originally observed entry.

    Args:
        train: Training split (its artificial mask is used when not resampling)
        cfg: epochs, batch_size, lr, artificial_fraction, artificial_scheme,
             resample_per_epoch, optimizer; hidden_dims/embed_dim/activation
             when no denoiser is given
        sched: Noise schedule
        rng: Random generator
        denoiser: Starting network (fresh one when None)

    Returns:
        (trained denoiser, mean loss per epoch)
    """
    if train.n_rows == 0:
        raise DatasetError("Phase 1 needs a non-empty training set")
    if denoiser is None:
        denoiser = Denoiser.initialize(train.n_cols, cfg.get('hidden_dims', (128, 128)), cfg.get('embed_dim', 64),
                                       cfg.get('activation', 'silu'), rng)

    epochs = int(cfg.get('epochs', 50))
    batch_size = int(cfg.get('batch_size', 64))
    lr = float(cfg.get('lr', 1e-3))
    fraction = float(cfg.get('artificial_fraction', 0.1))
    scheme = cfg.get('artificial_scheme', 'adjacent')
    resample = bool(cfg.get('resample_per_epoch', True))
    opt_state = OptimizerState(denoiser.net, cfg.get('optimizer', 'adam'))

    x_obs = train.x * train.m
    a = train.a
    loss_trace: List[float] = []

    logger.info("=" * 80)
    logger.info(f"[PHASE1] Pre-training on {train.n_rows} rows for {epochs} epochs "
                f"(p={fraction}, scheme={scheme}, resample={resample})")
    logger.info("=" * 80)

    for epoch in range(epochs):
        if resample or a is None:
            a = generate_artificial(scheme, train.m, fraction, train.axis_meta, rng)
        cond_mask = train.m - a
        order = rng.permutation(train.n_rows)
        batch_losses = []
        for start in range(0, train.n_rows, batch_size):
            rows = order[start:start + batch_size]
            x0, m, c = x_obs[rows], train.m[rows], cond_mask[rows]
            t = rng.integers(1, sched.T + 1, size=rows.size)
            eps = rng.standard_normal(x0.shape)
            x_t = forward_sample(x0, t, eps, sched)
            loss, grads = diff_loss(x0, m, x_t, t, denoiser, x0 * c, c, sched)
            optimizer_step(denoiser.net, grads, opt_state, lr)
            batch_losses.append(loss)
        loss_trace.append(float(np.mean(batch_losses)))
        logger.debug(f"[PHASE1] epoch {epoch + 1}/{epochs} loss={loss_trace[-1]:.6f}")
        if (epoch + 1) % 10 == 0 or epoch + 1 == epochs:
            logger.info(f"[PHASE1] epoch {epoch + 1}/{epochs} loss={loss_trace[-1]:.6f}")

    return denoiser, loss_trace


def _check_finite(arr: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteImputationError(t)


def _reverse_block(denoiser: Denoiser, x0_obs: np.ndarray, m: np.ndarray, sched: NoiseSchedule,
                   rng: np.random.Generator, guidance: Optional[GuidanceFn],
                   terminal_prior: Optional[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    observed = m == 1.0
    cond_obs = x0_obs * m
    x_t = rng.standard_normal(x0_obs.shape)
    if terminal_prior is not None:
        mean, var = terminal_prior
        x_t = mean + np.sqrt(var) * x_t

    x0_hat = x_t
    for t in range(sched.T, 0, -1):
        x0_hat, vjp = _denoise_traced(denoiser, x_t, t, cond_obs, m, sched)
        x0_hat = np.where(observed, x0_obs, x0_hat)
        if guidance is not None:
            x0_hat = x0_hat - guidance(x_t, t, x0_hat, x0_obs, m, vjp)
        _check_finite(x0_hat, t)
        ab_prev = sched.alpha_bar_at(t - 1)
        if t > 1:
            x_t = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * rng.standard_normal(x0_hat.shape)
        else:
            x_t = x0_hat
    return np.where(observed, x0_obs, x_t)


def reverse_chain(denoiser: Denoiser, x0_obs: np.ndarray, m: np.ndarray, sched: NoiseSchedule,
                  rng: np.random.Generator, guidance: Optional[GuidanceFn] = None, block_rows: int = 256,
                  threads: int = 1, terminal_prior: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """
    Run the reverse chain from t = T down to 1 for every row

    Rows are cut into fixed blocks, each with its own substream spawned from
    rng, so the result does not depend on the thread count.

    Args:
        denoiser: X0-prediction network (read only)
        x0_obs: Observed values [N x D] (entries under m=0 are ignored)
        m: Observation mask
        sched: Noise schedule
        rng: Random generator
        guidance: Optional correction subtracted from x0_hat each step
        block_rows: Rows per block
        threads: Worker threads
        terminal_prior: (mean, var) of the starting Gaussian, N(0, I) when None

    Returns:
        Imputed X0 equal to x0_obs on observed entries
    """
    x0_obs = as_tensor(x0_obs, 'x0_obs')
    m = as_tensor(m, 'm')
    if x0_obs.shape != m.shape or x0_obs.ndim != 2:
        raise ShapeError(f"x0_obs {x0_obs.shape} and m {m.shape} must be equal 2-D shapes")
    if x0_obs.shape[1] != denoiser.data_dim:
        raise ShapeError(f"Data has {x0_obs.shape[1]} features, denoiser expects {denoiser.data_dim}")
    x0_obs = np.where(m == 1.0, x0_obs, 0.0)

    n_rows = x0_obs.shape[0]
    starts = list(range(0, n_rows, max(1, int(block_rows))))
    streams = rng.spawn(len(starts))

    def run_block(i: int) -> np.ndarray:
        rows = slice(starts[i], starts[i] + block_rows)
        return _reverse_block(denoiser, x0_obs[rows], m[rows], sched, streams[i], guidance, terminal_prior)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run_block, range(len(starts))))
    else:
        blocks = [run_block(i) for i in range(len(starts))]

    if not blocks:
        return x0_obs.copy()
    return np.concatenate(blocks, axis=0)


def sample_unguided(denoiser: Denoiser, x0_obs: np.ndarray, m: np.ndarray, sched: NoiseSchedule,
                    rng: np.random.Generator, block_rows: int = 256, threads: int = 1,
                    terminal_prior: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """Reverse chain without recognizer guidance"""
    return reverse_chain(denoiser, x0_obs, m, sched, rng, None, block_rows, threads, terminal_prior)


class PriorGap:
    """Terminal forward marginal moments and their KL divergence to N(0, I)"""

    def __init__(self, mean: np.ndarray, var: np.ndarray, kl: float):
        self.mean = mean
        self.var = var
        self.kl = kl

    def to_dict(self) -> Dict[str, Any]:
        return {'mean': self.mean.tolist(), 'var': self.var.tolist(), 'kl': self.kl}

    def __repr__(self) -> str:
        return f"PriorGap(kl={self.kl:.4e})"


def prior_gap(x0: np.ndarray, sched: NoiseSchedule, m: Optional[np.ndarray] = None) -> PriorGap:
    """
    Moments of q(X_T) and KL(q(X_T) || N(0, I)) per independent dimension

    mean = sqrt(ab_T) E[x0], var = ab_T Var[x0] + 1 - ab_T, computed over
    observed entries when a mask is given.
    """
    x0 = as_tensor(x0, 'x0')
    weights = np.ones_like(x0) if m is None else as_tensor(m, 'm')
    counts = weights.sum(axis=0)
    if np.any(counts == 0):
        raise DatasetError("prior_gap needs at least one observed entry per column")
    data_mean = (x0 * weights).sum(axis=0) / counts
    data_var = (((x0 - data_mean) ** 2) * weights).sum(axis=0) / counts
    ab_T = float(sched.alpha_bar[-1])
    mean = np.sqrt(ab_T) * data_mean
    var = ab_T * data_var + (1.0 - ab_T)
    kl = float(0.5 * np.sum(var + mean ** 2 - 1.0 - np.log(var)))
    return PriorGap(mean, var, kl)
