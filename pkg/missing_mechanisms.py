"""
Missing-mechanism simulators
Original-missing masks under MCAR / MAR / MNAR and artificial masks for
diffusion pre-training. Masks use 1 = observed, 0 = missing; artificial masks
use 1 = observed entry hidden for supervision.
"""

import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from numerics import sigmoid

logger = logging.getLogger(__name__)

MECHANISM_KINDS = (
    'mcar', 'mar', 'mnar_logistic', 'mnar_quantile',
    'mnar_self_censor', 'mnar_latent', 'mnar_truncation',
)

MECHANISM_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'mcar': {'p': 0.1},
    'mar': {'driver_columns': [0], 'slope': 1.0, 'offset': -1.0},
    'mnar_logistic': {'W': 5.0, 'b': 0.8},
    'mnar_self_censor': {'W': 5.0, 'b': 0.8},
    'mnar_quantile': {'q': 0.3, 'feature_fraction': 0.5},
    'mnar_latent': {'W': 5.0, 'b': 0.8, 'latent_dim': 2, 'effect_scale': 1.0},
    'mnar_truncation': {'lower': None, 'upper': 1.0},
}

ARTIFICIAL_SCHEMES = ('adjacent', 'mcar')

# Gauss-Hermite nodes for E[f(Z)], Z ~ N(0, 1)
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2.0 * np.pi)


class MechanismError(ValueError):
    """Raised for invalid mechanism parameters"""


class MechanismSpec:
    """Mechanism kind plus its kind-specific parameters"""

    def __init__(self, kind: str, params: Optional[Dict[str, Any]] = None):
        if kind not in MECHANISM_KINDS:
            raise MechanismError(f"Unknown mechanism kind: {kind}")
        merged = dict(MECHANISM_DEFAULTS[kind])
        for key, value in (params or {}).items():
            if key not in merged:
                raise MechanismError(f"Unknown parameter '{key}' for mechanism {kind}")
            merged[key] = value
        self.kind = kind
        self.params = merged
        self.validate()

    def validate(self) -> None:
        p = self.params
        for key in ('p', 'q', 'feature_fraction'):
            if key in p and not 0.0 <= float(p[key]) <= 1.0:
                raise MechanismError(f"{self.kind}: {key} must lie in [0, 1], got {p[key]}")
        for key in ('W', 'b', 'slope', 'offset', 'effect_scale'):
            if key in p and not np.isfinite(float(p[key])):
                raise MechanismError(f"{self.kind}: {key} must be finite")
        if self.kind == 'mnar_latent' and int(p['latent_dim']) < 1:
            raise MechanismError("mnar_latent: latent_dim must be >= 1")
        if self.kind == 'mnar_truncation':
            lower, upper = _bounds(p)
            if lower >= upper:
                raise MechanismError(f"mnar_truncation: lower {lower} must be < upper {upper}")
        if self.kind == 'mar' and not p['driver_columns']:
            raise MechanismError("mar: driver_columns must be non-empty")

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'params': dict(self.params)}

    def __repr__(self) -> str:
        return f"MechanismSpec(kind={self.kind}, params={self.params})"


class MaskSample:
    """A generated mask and its realized missing ratio"""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.realized_missing_ratio = float(1.0 - self.mask.mean()) if self.mask.size else 0.0

    def __repr__(self) -> str:
        return f"MaskSample(shape={self.mask.shape}, missing={self.realized_missing_ratio:.4f})"


def _bounds(params: Dict[str, Any]) -> Tuple[float, float]:
    lower = -np.inf if params.get('lower') is None else float(params['lower'])
    upper = np.inf if params.get('upper') is None else float(params['upper'])
    return lower, upper


def _bernoulli_mask(missing_prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    missing = rng.random(missing_prob.shape) < missing_prob
    return (~missing).astype(np.float64)


def _check_values(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise MechanismError(f"Mechanisms expect a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise MechanismError("Mechanism input must be finite")
    return x


def gen_mcar(shape: Tuple[int, ...], p: float, rng: np.random.Generator) -> MaskSample:
    """Each entry missing independently with probability p"""
    if not 0.0 <= p <= 1.0:
        raise MechanismError(f"mcar: p must lie in [0, 1], got {p}")
    return MaskSample(_bernoulli_mask(np.full(shape, float(p)), rng))


def logistic_missing_prob(x: np.ndarray, W: float, b: float) -> np.ndarray:
    """p(missing | x) = sigmoid(W (x - b)); larger values go missing more often"""
    return sigmoid(W * (x - b))


def gen_mnar_logistic(x: np.ndarray, W: float, b: float, rng: np.random.Generator) -> MaskSample:
    """
    Self-masking logistic MNAR

    Args:
        x: Values the mechanism reads
        W: Slope
        b: Offset
        rng: Random generator

    Returns:
        MaskSample
    """
    x = _check_values(x)
    return MaskSample(_bernoulli_mask(logistic_missing_prob(x, W, b), rng))


def _quantile_columns(n_cols: int, feature_fraction: float, rng: np.random.Generator) -> np.ndarray:
    n_selected = int(round(feature_fraction * n_cols))
    if n_selected < 1:
        raise MechanismError(f"mnar_quantile: feature_fraction {feature_fraction} selects no column of {n_cols}")
    return np.sort(rng.choice(n_cols, size=n_selected, replace=False))


def gen_mnar_quantile(x: np.ndarray, q: float, feature_fraction: float, rng: np.random.Generator) -> MaskSample:
    """
    Quantile MNAR: in randomly chosen columns, entries above the column's
    (1 - q)-quantile go missing

    Args:
        x: Values
        q: Upper-tail mass removed per selected column
        feature_fraction: Fraction of columns affected
        rng: Random generator

    Returns:
        MaskSample
    """
    x = _check_values(x)
    if not 0.0 <= q <= 1.0 or not 0.0 < feature_fraction <= 1.0:
        raise MechanismError(f"mnar_quantile: q={q}, feature_fraction={feature_fraction} out of range")
    mask = np.ones_like(x)
    for col in _quantile_columns(x.shape[1], feature_fraction, rng):
        threshold = np.quantile(x[:, col], 1.0 - q)
        mask[:, col] = (x[:, col] <= threshold).astype(np.float64)
    return MaskSample(mask)


def _latent_projection(latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal(latent_dim)
    return w / np.linalg.norm(w)


def gen_mnar_subtype(kind: str, x: np.ndarray, params: Dict[str, Any], rng: np.random.Generator) -> MaskSample:
    """
    MNAR subtypes: self_censor, latent, truncation

    self_censor is the logistic mechanism; latent adds effect_scale * (w . u)
    to the logit with a per-row u ~ N(0, I) and a fixed unit projection w;
    truncation hides every entry outside [lower, upper].
    """
    x = _check_values(x)
    if kind == 'self_censor':
        return gen_mnar_logistic(x, float(params['W']), float(params['b']), rng)

    if kind == 'latent':
        latent_dim = int(params['latent_dim'])
        w = _latent_projection(latent_dim, rng)
        u = rng.standard_normal((x.shape[0], latent_dim))
        latent_logit = float(params['effect_scale']) * (u @ w)
        logits = latent_logit[:, None] + float(params['W']) * (x - float(params['b']))
        return MaskSample(_bernoulli_mask(sigmoid(logits), rng))

    if kind == 'truncation':
        lower, upper = _bounds(params)
        if lower >= upper:
            raise MechanismError(f"truncation: lower {lower} must be < upper {upper}")
        return MaskSample(((x >= lower) & (x <= upper)).astype(np.float64))

    raise MechanismError(f"Unknown MNAR subtype: {kind}")


def _mar_probability(x: np.ndarray, driver_columns: Sequence[int], slope: float, offset: float) -> np.ndarray:
    drivers = np.asarray(driver_columns, dtype=int)
    if drivers.size == 0:
        raise MechanismError("mar: driver_columns must be non-empty")
    if np.any(drivers < 0) or np.any(drivers >= x.shape[1]):
        raise MechanismError(f"mar: driver column out of range for D={x.shape[1]}")
    if np.unique(drivers).size == x.shape[1]:
        raise MechanismError("mar: driver columns cover every column; nothing left to mask")
    row_prob = sigmoid(slope * x[:, drivers].mean(axis=1) + offset)
    prob = np.repeat(row_prob[:, None], x.shape[1], axis=1)
    prob[:, drivers] = 0.0
    return prob


def gen_mar(x: np.ndarray, driver_columns: Sequence[int], slope: float, offset: float,
            rng: np.random.Generator) -> MaskSample:
    """
    MAR: non-driver entries missing with probability
    sigmoid(slope * mean(row drivers) + offset); driver columns stay observed
    """
    x = _check_values(x)
    prob = _mar_probability(x, driver_columns, slope, offset)
    return MaskSample(_bernoulli_mask(prob, rng))


def _artificial_budget(m: np.ndarray, target_fraction: float) -> int:
    if not 0.0 <= target_fraction <= 1.0:
        raise MechanismError(f"Artificial fraction must lie in [0, 1], got {target_fraction}")
    return int(np.floor(target_fraction * m.sum() + 1e-9))


def gen_mcar_artificial(m: np.ndarray, target_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Hide floor(p * observed) observed entries chosen uniformly"""
    m = np.asarray(m, dtype=np.float64)
    budget = _artificial_budget(m, target_fraction)
    a = np.zeros(m.size)
    observed = np.flatnonzero(m.reshape(-1) == 1.0)
    if budget:
        a[rng.choice(observed, size=budget, replace=False)] = 1.0
    return a.reshape(m.shape)


def gen_adjacent_artificial(m: np.ndarray, target_fraction: float, axis_meta: Optional[Tuple[int, int]],
                            rng: np.random.Generator) -> np.ndarray:
    """
    Adjacent target masking

    Picks observed entries whose temporal neighbour (t-1 or t+1, same
    feature) is originally missing, up to floor(p * observed) of them; any
    shortfall is filled uniformly from the remaining observed entries.

    Args:
        m: Original mask [N x D]
        target_fraction: p
        axis_meta: (K, L) layout of each row; None means no temporal axis
        rng: Random generator

    Returns:
        Artificial mask a with a <= m
    """
    m = np.asarray(m, dtype=np.float64)
    budget = _artificial_budget(m, target_fraction)
    a = np.zeros(m.size)
    if budget == 0:
        return a.reshape(m.shape)

    observed = m == 1.0
    if axis_meta is None:
        candidates = np.array([], dtype=int)
    else:
        n_features, window_len = axis_meta
        cube = observed.reshape(m.shape[0], n_features, window_len)
        missing = ~cube
        near_missing = np.zeros_like(cube)
        near_missing[:, :, 1:] |= missing[:, :, :-1]
        near_missing[:, :, :-1] |= missing[:, :, 1:]
        candidates = np.flatnonzero((cube & near_missing).reshape(-1))

    take = min(budget, candidates.size)
    if take:
        a[rng.choice(candidates, size=take, replace=False)] = 1.0
    shortfall = budget - take
    if shortfall:
        pool = np.flatnonzero(observed.reshape(-1) & (a == 0.0))
        a[rng.choice(pool, size=shortfall, replace=False)] = 1.0
        logger.debug(f"[MECHANISM] Adjacent pool had {candidates.size} entries; {shortfall} drawn MCAR")
    return a.reshape(m.shape)


def generate_artificial(scheme: str, m: np.ndarray, target_fraction: float,
                        axis_meta: Optional[Tuple[int, int]], rng: np.random.Generator) -> np.ndarray:
    """Dispatch on the artificial-masking scheme"""
    if scheme == 'adjacent':
        return gen_adjacent_artificial(m, target_fraction, axis_meta, rng)
    if scheme == 'mcar':
        return gen_mcar_artificial(m, target_fraction, rng)
    raise MechanismError(f"Unknown artificial scheme: {scheme}")


def generate_mask(spec: MechanismSpec, x: np.ndarray, rng: np.random.Generator) -> MaskSample:
    """
    Generate an original-missing mask for x under spec

    Args:
        spec: Mechanism
        x: Values the mechanism reads
        rng: Random generator

    Returns:
        MaskSample
    """
    p = spec.params
    if spec.kind == 'mcar':
        sample = gen_mcar(np.shape(x), float(p['p']), rng)
    elif spec.kind == 'mar':
        sample = gen_mar(x, p['driver_columns'], float(p['slope']), float(p['offset']), rng)
    elif spec.kind == 'mnar_logistic':
        sample = gen_mnar_logistic(x, float(p['W']), float(p['b']), rng)
    elif spec.kind == 'mnar_quantile':
        sample = gen_mnar_quantile(x, float(p['q']), float(p['feature_fraction']), rng)
    else:
        sample = gen_mnar_subtype(spec.kind[len('mnar_'):], x, p, rng)
    logger.info(f"[MECHANISM] {spec.kind}: realized missing ratio {sample.realized_missing_ratio:.4f}")
    return sample


def expected_missing_ratio(spec: MechanismSpec, x: np.ndarray) -> Tuple[float, float]:
    """
    Analytic expectation of the missing ratio on x and its binomial sigma

    Quantile and truncation mechanisms are deterministic given their column
    choice, so their sigma is 0; the quantile expectation averages over the
    column draw.

    Returns:
        (expected ratio, standard deviation of the realized ratio)
    """
    x = _check_values(x)
    p = spec.params
    if spec.kind == 'mcar':
        prob = np.full(x.shape, float(p['p']))
    elif spec.kind == 'mar':
        prob = _mar_probability(x, p['driver_columns'], float(p['slope']), float(p['offset']))
    elif spec.kind in ('mnar_logistic', 'mnar_self_censor'):
        prob = logistic_missing_prob(x, float(p['W']), float(p['b']))
    elif spec.kind == 'mnar_latent':
        base = float(p['W']) * (x - float(p['b']))
        scale = float(p['effect_scale'])
        prob = sum(w * sigmoid(base + scale * z) for z, w in zip(_GH_NODES, _GH_WEIGHTS))
    elif spec.kind == 'mnar_truncation':
        lower, upper = _bounds(p)
        return float(np.mean((x < lower) | (x > upper))), 0.0
    else:
        n_selected = int(round(float(p['feature_fraction']) * x.shape[1]))
        thresholds = np.quantile(x, 1.0 - float(p['q']), axis=0)
        above = (x > thresholds).mean(axis=0)
        return float(above.mean() * n_selected / x.shape[1]), 0.0

    expected = float(prob.mean())
    sigma = float(np.sqrt(np.sum(prob * (1.0 - prob)))) / prob.size
    return expected, sigma
