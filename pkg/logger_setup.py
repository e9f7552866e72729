"""
Logging configuration for the imputation experiments
"""

import logging
import logging.handlers
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from config_loader import ConfigError, get_config

LOG_LEVEL_ENV = 'PRDIM_LOG_LEVEL'
DEFAULT_LOGGING = {'level': 'INFO', 'log_file': 'logs/prdim.log', 'console_output': True}


def _logging_section() -> Dict[str, Any]:
    try:
        return get_config().get_section('logging')
    except (FileNotFoundError, ConfigError):
        return {}


def setup_logging(logging_config: Optional[Dict[str, Any]] = None) -> logging.Logger:
    """
    Configure the root logger

    Args:
        logging_config: The 'logging' config section; read from config.json
            when None. PRDIM_LOG_LEVEL (environment or .env) overrides the level.

    Returns:
        Root logger
    """
    load_dotenv()
    settings = dict(DEFAULT_LOGGING)
    settings.update(logging_config if logging_config is not None else _logging_section())

    log_level = os.getenv(LOG_LEVEL_ENV, settings['level']).upper()
    if not isinstance(getattr(logging, log_level, None), int):
        log_level = 'INFO'
    log_file = settings['log_file']
    console_output = settings['console_output']

    log_dir = os.path.dirname(log_file)
    if log_dir and not os.path.exists(log_dir):
        os.makedirs(log_dir)

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level))

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    file_handler = logging.handlers.RotatingFileHandler(
        log_file,
        maxBytes=10485760,  # 10MB
        backupCount=5
    )
    file_handler.setLevel(getattr(logging, log_level))
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)

    if console_output:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(getattr(logging, log_level))
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)

    logging.info(f"Logging initialized. Level: {log_level}, File: {log_file}")

    return root_logger
