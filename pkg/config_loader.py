"""
Configuration loader for imputation experiments
Strictly parses and validates experiment configs (config.json by default)
"""

import copy
import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from em_engine import EmConfig
from missing_mechanisms import ARTIFICIAL_SCHEMES, MechanismError, MechanismSpec

logger = logging.getLogger(__name__)

REQUIRED = object()
FREE_FORM = object()
MAX_SEED = 2 ** 64
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')

# Every accepted key with its default; REQUIRED keys must be given,
# FREE_FORM sections are checked by their consumer
DEFAULTS: Dict[str, Any] = {
    'data': {
        'source': REQUIRED,
        'csv': {'path': None, 'has_header': False, 'missing_token': 'NaN'},
        'synthetic': {'ar_coef': 0.8, 'noise_std': 1.0, 'n_features': 5, 'n_steps': 15000},
        'window': {'enabled': True, 'window_len': 24, 'stride': 24},
        'split': {'ratios': [0.8, 0.0, 0.2], 'shuffle': True},
    },
    'mechanism': {'kind': REQUIRED, 'on_standardized': True, 'params': FREE_FORM},
    'schedule': {'T': 50, 'beta_min': 1e-4, 'beta_max': 0.5, 'kind': 'quadratic'},
    'denoiser': {'hidden_dims': [128, 128], 'embed_dim': 64, 'activation': 'silu'},
    'recognizer': {'hidden_width': None, 'hidden_layers': 3, 'activation': 'silu', 'init': 'xavier'},
    'phase1': {
        'epochs': 50, 'batch_size': 64, 'lr': 1e-3, 'artificial_fraction': 0.1,
        'artificial_scheme': 'adjacent', 'resample_per_epoch': True, 'optimizer': 'adam',
    },
    'em': dict(EmConfig.FIELDS),
    'evaluation': {'data_space': True, 'guidance_sweep': [], 'w2': True, 'w2_max_points': 512},
    'output': {'dir': 'runs/default', 'checkpoint': True},
    'logging': {'level': 'INFO', 'log_file': 'logs/prdim.log', 'console_output': True},
    'seed': 0,
}


class ConfigError(ValueError):
    """Raised for malformed, unknown, missing or invalid config entries"""


def _reject_duplicates(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    result = {}
    for key, value in pairs:
        if key in result:
            raise ConfigError(f"Duplicate key: {key}")
        result[key] = value
    return result


def _merge(defaults: Dict[str, Any], given: Dict[str, Any], prefix: str, applied: List[str],
           missing: List[str]) -> Dict[str, Any]:
    if not isinstance(given, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object")
    for key in given:
        if key not in defaults:
            raise ConfigError(f"Unknown key: {prefix}{key}")

    merged = {}
    for key, default in defaults.items():
        path = f"{prefix}{key}"
        if key not in given and isinstance(default, dict):
            merged[key] = _merge(default, {}, f"{path}.", applied, missing)
        elif key not in given:
            if default is REQUIRED:
                missing.append(path)
            elif default is FREE_FORM:
                merged[key] = {}
                applied.append(path)
            else:
                merged[key] = copy.deepcopy(default)
                applied.append(path)
        elif isinstance(default, dict):
            merged[key] = _merge(default, given[key], f"{path}.", applied, missing)
        elif default is FREE_FORM and not isinstance(given[key], dict):
            raise ConfigError(f"{path} must be an object")
        else:
            merged[key] = given[key]
    return merged


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{key}: {message}")


def _validate(data: Dict[str, Any], base_dir: str) -> None:
    source = data['data']['source']
    _require(source in ('csv', 'synthetic'), 'data.source', f"must be 'csv' or 'synthetic', got {source!r}")
    if source == 'csv':
        path = data['data']['csv']['path']
        _require(isinstance(path, str), 'data.csv.path', "required when data.source is 'csv'")
        resolved = path if os.path.isabs(path) else os.path.join(base_dir, path)
        _require(os.path.exists(resolved), 'data.csv.path', f"file not found: {resolved}")

    window = data['data']['window']
    _require(int(window['window_len']) >= 1, 'data.window.window_len', "must be >= 1")
    _require(int(window['stride']) >= 1, 'data.window.stride', "must be >= 1")

    ratios = data['data']['split']['ratios']
    _require(isinstance(ratios, list) and len(ratios) == 3, 'data.split.ratios', "must list train/valid/test")
    _require(all(r >= 0 for r in ratios) and sum(ratios) <= 1.0 + 1e-9, 'data.split.ratios',
             "must be non-negative and sum to at most 1")

    try:
        MechanismSpec(data['mechanism']['kind'], data['mechanism']['params'])
    except MechanismError as e:
        raise ConfigError(f"mechanism: {e}")

    sched = data['schedule']
    _require(isinstance(sched['T'], int) and sched['T'] >= 1, 'schedule.T', "must be an integer >= 1")
    _require(0.0 < sched['beta_min'] < sched['beta_max'] < 1.0, 'schedule',
             "need 0 < beta_min < beta_max < 1")
    _require(sched['kind'] in ('quadratic', 'linear'), 'schedule.kind', f"unknown kind {sched['kind']!r}")

    phase1 = data['phase1']
    _require(0.0 <= phase1['artificial_fraction'] <= 1.0, 'phase1.artificial_fraction', "must lie in [0, 1]")
    _require(phase1['artificial_scheme'] in ARTIFICIAL_SCHEMES, 'phase1.artificial_scheme',
             f"must be one of {ARTIFICIAL_SCHEMES}")
    _require(int(phase1['batch_size']) >= 1, 'phase1.batch_size', "must be >= 1")

    try:
        EmConfig.from_dict(data['em'])
    except ValueError as e:
        raise ConfigError(f"em: {e}")

    sweep = data['evaluation']['guidance_sweep']
    _require(isinstance(sweep, list) and all(isinstance(s, (int, float)) and s >= 0 for s in sweep),
             'evaluation.guidance_sweep', "must be a list of non-negative scales")

    level = str(data['logging']['level']).upper()
    _require(level in LOG_LEVELS, 'logging.level', f"must be one of {LOG_LEVELS}")

    seed = data['seed']
    _require(isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < MAX_SEED, 'seed',
             "must be an unsigned 64-bit integer")


class ExperimentConfig:
    """A validated experiment config with every default filled in"""

    def __init__(self, data: Dict[str, Any], defaults_applied: List[str], base_dir: str = '.'):
        self.data = data
        self.defaults_applied = defaults_applied
        self.base_dir = base_dir

    def get(self, key: str, default: Any = None) -> Any:
        """Dot-notation lookup, e.g. get('em.iterations')"""
        value = self.data
        for k in key.split('.'):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def get_section(self, section: str) -> Dict[str, Any]:
        return self.data.get(section, {})

    def resolve_path(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def with_overrides(self, **overrides: Any) -> 'ExperimentConfig':
        """Copy with dotted-key overrides applied and re-validated"""
        data = copy.deepcopy(self.data)
        for key, value in overrides.items():
            node = data
            parts = key.split('.')
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = value
        return parse_config(json.dumps(data), self.base_dir)

    def to_text(self) -> str:
        """Canonical JSON text (sorted keys)"""
        return json.dumps(self.data, sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExperimentConfig) and self.to_text() == other.to_text()

    def __repr__(self) -> str:
        return f"ExperimentConfig(hash={self.config_hash()[:12]}, defaults_applied={len(self.defaults_applied)})"


def parse_config(text: str, base_dir: str = '.') -> ExperimentConfig:
    """
    Parse and validate experiment config text

    Args:
        text: JSON config text
        base_dir: Directory relative paths are resolved against

    Returns:
        ExperimentConfig
    """
    try:
        given = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in config: {e}")

    applied: List[str] = []
    missing: List[str] = []
    data = _merge(DEFAULTS, given, '', applied, missing)
    if missing:
        raise ConfigError(f"Missing required keys: {', '.join(missing)}")
    _validate(data, base_dir)
    return ExperimentConfig(data, applied, base_dir)


class ConfigLoader:
    """Loads and manages the experiment configuration from config.json"""

    _instance: Optional['ConfigLoader'] = None
    _config: Dict[str, Any] = {}

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(ConfigLoader, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if not self._config:
            self.load_config()

    def load_config(self, config_path: str = "config.json") -> Dict[str, Any]:
        """
        Load configuration from a JSON file

        Args:
            config_path: Path to the config file

        Returns:
            Configuration dictionary
        """
        if not os.path.exists(config_path):
            raise FileNotFoundError(f"Configuration file not found: {config_path}")

        with open(config_path, 'r', encoding='utf-8') as f:
            experiment = parse_config(f.read(), os.path.dirname(os.path.abspath(config_path)))
        self._config = experiment.data
        self._base_dir = experiment.base_dir
        logger.info(f"Configuration loaded successfully from {config_path} "
                    f"({len(experiment.defaults_applied)} defaults applied)")
        return self._config

    def experiment(self) -> ExperimentConfig:
        """Current values as a validated ExperimentConfig"""
        return parse_config(json.dumps(self._config), getattr(self, '_base_dir', '.'))

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value by dot-notation key

        Example: get('em.iterations')
        """
        value = self._config
        for k in key.split('.'):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def get_section(self, section: str) -> Dict[str, Any]:
        return self._config.get(section, {})

    def __repr__(self) -> str:
        return f"ConfigLoader(config={list(self._config.keys())})"


def get_config() -> ConfigLoader:
    """Get or create the global ConfigLoader instance"""
    return ConfigLoader()
