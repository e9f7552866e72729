"""
EM engine
Alternates a recognizer-guided reverse-diffusion E step with a joint M step
that refits the denoiser on the completed data and the recognizer on the
observation mask.
"""

import logging
import os
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from checkpoint import save_checkpoint
from data_loader import MaskedDataset
from diffusion import (Denoiser, DenoiserVjp, GuidanceFn, NoiseSchedule, NonFiniteImputationError,
                       denoiser_input_grad, diff_loss, forward_sample, prior_gap, reverse_chain)
from evaluation import compute_metrics
from numerics import OptimizerState, ShapeError, optimizer_step
from pattern_recognizer import PatternRecognizer, pr_input_grad, pr_loss, pr_train_step

logger = logging.getLogger(__name__)

GUIDANCE_PATHS = ('full_chain', 'x0hat_only')
EM_MODES = ('hard', 'soft')
INITIAL_NOISE = ('standard', 'data_moments')
M_STEP_CONDITIONS = ('shuffled', 'observed')

__all__ = ['EmConfig', 'EmState', 'NonFiniteImputationError', 'e_step', 'm_step', 'run_em',
           'impute_out_of_sample', 'make_guidance']


class EmConfig:
    """Settings of the EM loop (the 'em' config section)"""

    FIELDS = {
        'iterations': 100,
        'maximization_epochs': 1,
        'lr_theta': 5e-4,
        'lr_phi': 1e-3,
        'guidance_scale': 1.0,
        'guidance_path': 'full_chain',
        'mode': 'hard',
        'soft_samples': 4,
        'grad_clip_norm': None,
        'batch_size': 64,
        'block_rows': 256,
        'threads': 1,
        'train_recognizer': True,
        'optimizer': 'adam',
        'initial_noise': 'standard',
        'm_step_condition': 'shuffled',
        'checkpoint_every': 0,
    }

    def __init__(self, **kwargs):
        unknown = set(kwargs) - set(self.FIELDS)
        if unknown:
            raise ValueError(f"Unknown EM settings: {sorted(unknown)}")
        for key, default in self.FIELDS.items():
            setattr(self, key, kwargs.get(key, default))
        self.validate()

    @classmethod
    def from_dict(cls, section: Dict[str, Any]) -> 'EmConfig':
        return cls(**section)

    def validate(self) -> None:
        if int(self.iterations) < 1:
            raise ValueError(f"em.iterations must be >= 1, got {self.iterations}")
        if int(self.maximization_epochs) < 1:
            raise ValueError(f"em.maximization_epochs must be >= 1, got {self.maximization_epochs}")
        if float(self.guidance_scale) < 0:
            raise ValueError(f"em.guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.guidance_path not in GUIDANCE_PATHS:
            raise ValueError(f"Unknown guidance path: {self.guidance_path}")
        if self.mode not in EM_MODES:
            raise ValueError(f"Unknown EM mode: {self.mode}")
        if self.mode == 'soft' and int(self.soft_samples) < 2:
            raise ValueError("Soft EM needs soft_samples >= 2")
        if self.initial_noise not in INITIAL_NOISE:
            raise ValueError(f"Unknown initial noise: {self.initial_noise}")
        if self.m_step_condition not in M_STEP_CONDITIONS:
            raise ValueError(f"Unknown M-step conditioning: {self.m_step_condition}")
        if self.grad_clip_norm is not None and float(self.grad_clip_norm) <= 0:
            raise ValueError("em.grad_clip_norm must be positive")

    @property
    def is_baseline(self) -> bool:
        """No guidance and a frozen recognizer: plain conditional-diffusion EM"""
        return float(self.guidance_scale) == 0.0 and not self.train_recognizer

    def replace(self, **changes) -> 'EmConfig':
        values = self.to_dict()
        values.update(changes)
        return EmConfig(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in self.FIELDS}


class EmState:
    """Networks, optimizer states, current imputation and per-iteration traces"""

    def __init__(self, denoiser: Denoiser, recognizer: PatternRecognizer, cfg: EmConfig,
                 imputed: Optional[np.ndarray] = None):
        self.denoiser = denoiser
        self.recognizer = recognizer
        self.imputed = imputed
        self.iteration = 0
        self.trace: List[Dict[str, Any]] = []
        self.theta_opt = OptimizerState(denoiser.net, cfg.optimizer)
        self.phi_opt = OptimizerState(recognizer.net, cfg.optimizer)
        self.terminal_prior: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __repr__(self) -> str:
        return f"EmState(iteration={self.iteration}, D={self.denoiser.data_dim})"


def make_guidance(state: EmState, sched: NoiseSchedule, cfg: EmConfig) -> Optional[GuidanceFn]:
    """
    Build the recognizer guidance term for the reverse chain

    Returns None when the guidance scale is zero. Otherwise the returned
    callable computes s (1 - ab_t) / sqrt(ab_t) * g with g the recognizer-loss
    gradient carried to x_t, zero on observed entries and clipped per row.
    """
    scale = float(cfg.guidance_scale)
    if scale == 0.0:
        return None
    data_dim = state.denoiser.data_dim
    clip = float(cfg.grad_clip_norm) if cfg.grad_clip_norm is not None else 10.0 * np.sqrt(data_dim)

    def guidance(x_t: np.ndarray, t: int, x0_hat: np.ndarray, x0_obs: np.ndarray, m: np.ndarray,
                 vjp: Optional[DenoiserVjp] = None) -> np.ndarray:
        missing = 1.0 - m
        ab_t = sched.alpha_bar_at(t)
        g = pr_input_grad(m, x0_hat, state.recognizer, reduction='row_mean') * missing
        if cfg.guidance_path == 'x0hat_only':
            g = g / np.sqrt(ab_t)
        elif vjp is not None:
            g = vjp(g)
        else:
            g = denoiser_input_grad(state.denoiser, x_t, t, x0_obs * m, m, g, sched)
        g = g * missing
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        over = norms > clip
        # rows within the bound (zero rows included) keep factor 1
        factor = np.divide(clip, norms, out=np.ones_like(norms), where=over)
        return scale * (1.0 - ab_t) / np.sqrt(ab_t) * (g * factor)

    return guidance


def e_step(state: EmState, x0_obs: np.ndarray, m: np.ndarray, sched: NoiseSchedule, cfg: EmConfig,
           rng: np.random.Generator) -> np.ndarray:
    """
    Guided reverse diffusion from X_T to a completed X_0

    Hard mode returns one chain; soft mode averages soft_samples chains
    drawn from spawned substreams. Observed entries equal x0_obs exactly.

    Args:
        state: Current networks
        x0_obs: Observed values (anything under m=0)
        m: Observation mask
        sched: Noise schedule
        cfg: EM settings
        rng: Random generator

    Returns:
        Imputed matrix
    """
    guidance = make_guidance(state, sched, cfg)
    kwargs = dict(guidance=guidance, block_rows=int(cfg.block_rows), threads=int(cfg.threads),
                  terminal_prior=state.terminal_prior)
    if cfg.mode == 'hard':
        return reverse_chain(state.denoiser, x0_obs, m, sched, rng, **kwargs)

    samples = [reverse_chain(state.denoiser, x0_obs, m, sched, stream, **kwargs)
               for stream in rng.spawn(int(cfg.soft_samples))]
    mean = np.mean(samples, axis=0)
    return np.where(m == 1.0, x0_obs, mean)


def m_step(state: EmState, x0: np.ndarray, m: np.ndarray, sched: NoiseSchedule, cfg: EmConfig,
           rng: np.random.Generator) -> Tuple[float, float]:
    """
    Refit the denoiser on completed rows and the recognizer on the mask

    The denoiser regresses every entry (all-ones target). With
    m_step_condition 'shuffled' it conditions each completed row on the
    observation pattern of the row before it in the epoch order, so the
    conditioning pattern carries no information about the row's own values
    and the mechanism stays with the recognizer; 'observed' conditions on
    the row's own mask. The recognizer takes one step per minibatch unless
    cfg.train_recognizer is off.

    Returns:
        (mean diffusion loss, mean recognizer loss)
    """
    if not np.all(np.isfinite(x0)):
        raise NonFiniteImputationError(0, "M step received a non-finite imputation")
    n_rows = x0.shape[0]
    batch_size = int(cfg.batch_size)
    diff_losses, pr_losses = [], []

    for _ in range(int(cfg.maximization_epochs)):
        order = rng.permutation(n_rows)
        cond = m[np.roll(order, 1)] if cfg.m_step_condition == 'shuffled' else m[order]
        for start in range(0, n_rows, batch_size):
            rows = order[start:start + batch_size]
            xb, mb, cb = x0[rows], m[rows], cond[start:start + batch_size]
            t = rng.integers(1, sched.T + 1, size=rows.size)
            x_t = forward_sample(xb, t, rng.standard_normal(xb.shape), sched)
            loss, grads = diff_loss(xb, np.ones_like(xb), x_t, t, state.denoiser, xb * cb, cb, sched)
            optimizer_step(state.denoiser.net, grads, state.theta_opt, float(cfg.lr_theta))
            diff_losses.append(loss)
            if cfg.train_recognizer:
                _, pl = pr_train_step(state.recognizer, mb, xb, float(cfg.lr_phi), state.phi_opt)
            else:
                pl = pr_loss(mb, xb, state.recognizer)
            pr_losses.append(pl)

    return float(np.mean(diff_losses)), float(np.mean(pr_losses))


def _in_sample_metrics(train: MaskedDataset, imputed: np.ndarray,
                       to_data_space: Optional[Callable[[np.ndarray], np.ndarray]]) -> Dict[str, Optional[float]]:
    eval_mask = train.original_missing_mask()
    if eval_mask.sum() == 0:
        return {'mae_in': None, 'rmse_in': None, 'mre_in': None}
    truth, pred = train.x, imputed
    if to_data_space is not None:
        truth, pred = to_data_space(truth), to_data_space(pred)
    report = compute_metrics(truth, pred, eval_mask, 'original_in_sample')
    return {'mae_in': report.mae, 'rmse_in': report.rmse, 'mre_in': report.mre_percent}


def run_em(denoiser: Optional[Denoiser], recognizer: Optional[PatternRecognizer], train: MaskedDataset,
           sched: NoiseSchedule, cfg: EmConfig, rng: np.random.Generator,
           to_data_space: Optional[Callable[[np.ndarray], np.ndarray]] = None,
           checkpoint_dir: Optional[str] = None) -> EmState:
    """
    Run the EM loop for cfg.iterations iterations

    Args:
        denoiser: Phase-1 denoiser (a cold-start network is built when None)
        recognizer: Starting recognizer (fresh one when None)
        train: Training split; ground truth under m=0 enables in-sample metrics
        sched: Noise schedule
        cfg: EM settings
        rng: Random generator
        to_data_space: Maps standardized values back for metric computation
        checkpoint_dir: Where periodic checkpoints go (cfg.checkpoint_every > 0)

    Returns:
        Final EmState with one trace row per iteration
    """
    if int(cfg.iterations) < 1:
        raise ValueError("EM needs at least one iteration")
    init_rng, loop_rng = rng.spawn(2)
    if denoiser is None:
        logger.warning("[EM] No Phase-1 denoiser supplied; starting from a freshly initialized network")
        denoiser = Denoiser.initialize(train.n_cols, rng=init_rng)
    if recognizer is None:
        scheme = 'zeros' if cfg.is_baseline else 'xavier'
        recognizer = PatternRecognizer.initialize(train.n_cols, rng=init_rng, scheme=scheme)
    if denoiser.data_dim != train.n_cols or recognizer.data_dim != train.n_cols:
        raise ShapeError(f"Networks expect D={denoiser.data_dim}/{recognizer.data_dim}, data has {train.n_cols}")

    state = EmState(denoiser, recognizer, cfg)
    x0_obs = train.x * train.m
    m = train.m
    if cfg.initial_noise == 'data_moments':
        gap = prior_gap(train.x, sched, m)
        state.terminal_prior = (gap.mean, gap.var)

    logger.info("=" * 80)
    logger.info(f"[EM] {cfg.iterations} iterations, mode={cfg.mode}, s={cfg.guidance_scale}, "
                f"path={cfg.guidance_path}, baseline={cfg.is_baseline}")
    logger.info("=" * 80)

    for k in range(int(cfg.iterations)):
        e_rng, m_rng = loop_rng.spawn(2)
        imputed = e_step(state, x0_obs, m, sched, cfg, e_rng)
        state.imputed = imputed
        metrics = _in_sample_metrics(train, imputed, to_data_space)
        l_diff, l_pr = m_step(state, imputed, m, sched, cfg, m_rng)
        state.iteration = k + 1
        state.trace.append({'iteration': k + 1, 'L_diff': l_diff, 'L_PR': l_pr, **metrics})

        mae = metrics['mae_in']
        logger.info(f"[E-STEP] iteration {k + 1}/{cfg.iterations} "
                    f"mae_in={'n/a' if mae is None else f'{mae:.4f}'}")
        logger.info(f"[M-STEP] iteration {k + 1}/{cfg.iterations} L_diff={l_diff:.6f} L_PR={l_pr:.6f}")

        every = int(cfg.checkpoint_every or 0)
        if checkpoint_dir and every > 0 and (k + 1) % every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"em_iter_{k + 1:04d}.ckpt"),
                            {'denoiser': state.denoiser.net, 'recognizer': state.recognizer.net},
                            {'iteration': k + 1, 'embed_dim': state.denoiser.embed_dim})

    return state


def impute_out_of_sample(state: EmState, test_x0_obs: np.ndarray, test_m: np.ndarray, sched: NoiseSchedule,
                         cfg: EmConfig, rng: np.random.Generator) -> np.ndarray:
    """E step on held-out rows with the trained networks frozen"""
    test_x0_obs = np.asarray(test_x0_obs, dtype=np.float64)
    if test_x0_obs.ndim != 2 or test_x0_obs.shape[1] != state.denoiser.data_dim:
        raise ShapeError(f"Test data has shape {test_x0_obs.shape}, model expects D={state.denoiser.data_dim}")
    logger.info(f"[IMPUTE] Out-of-sample imputation of {test_x0_obs.shape[0]} rows")
    return e_step(state, test_x0_obs, test_m, sched, cfg, rng)
