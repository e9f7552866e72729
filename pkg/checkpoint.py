"""
Checkpoint storage for trained networks
One text file: a JSON header line, then one line of shortest-repr floats per tensor
"""

import json
import logging
import os
from typing import Any, Dict, Tuple

import numpy as np

from numerics import Mlp

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'prdim-checkpoint'
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files"""


def _encode_tensor(values: np.ndarray) -> str:
    return ' '.join(repr(float(v)) for v in values.reshape(-1))


def _decode_tensor(line: str, shape) -> np.ndarray:
    tokens = line.split()
    expected = int(np.prod(shape))
    if len(tokens) != expected:
        raise CheckpointError(f"Tensor line has {len(tokens)} values, expected {expected}")
    return np.array([float(tok) for tok in tokens], dtype=np.float64).reshape(shape)


def save_checkpoint(path: str, networks: Dict[str, Mlp], metadata: Dict[str, Any] = None) -> str:
    """
    Write networks and metadata to a checkpoint file

    Args:
        path: Output file path
        networks: Named networks (e.g. 'denoiser', 'recognizer')
        metadata: JSON-serializable extras (normalization stats, schedule, config)

    Returns:
        The path written
    """
    header = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'networks': {},
        'tensors': [],
        'metadata': metadata or {},
    }
    lines = []
    for name, net in networks.items():
        header['networks'][name] = {
            'layer_dims': net.layer_dims,
            'hidden_activation': net.hidden_activation,
            'output_activation': net.output_activation,
        }
        for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
            header['tensors'].append({'network': name, 'kind': 'weight', 'layer': layer, 'shape': list(w.shape)})
            lines.append(_encode_tensor(w))
            header['tensors'].append({'network': name, 'kind': 'bias', 'layer': layer, 'shape': list(b.shape)})
            lines.append(_encode_tensor(b))

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(header, sort_keys=True) + '\n')
        for line in lines:
            f.write(line + '\n')

    logger.info(f"[CHECKPOINT] Saved {list(networks)} to {path}")
    return path


def load_checkpoint(path: str) -> Tuple[Dict[str, Mlp], Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint

    Args:
        path: Checkpoint file

    Returns:
        (networks by name, metadata)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        header_line = f.readline()
        tensor_lines = [line.rstrip('\n') for line in f]

    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Invalid checkpoint header in {path}: {e}")

    if header.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if header.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {header.get('version')}")
    if len(tensor_lines) != len(header['tensors']):
        raise CheckpointError(f"Header lists {len(header['tensors'])} tensors, file has {len(tensor_lines)}")

    weights: Dict[str, list] = {name: [] for name in header['networks']}
    biases: Dict[str, list] = {name: [] for name in header['networks']}
    for entry, line in zip(header['tensors'], tensor_lines):
        tensor = _decode_tensor(line, tuple(entry['shape']))
        target = weights if entry['kind'] == 'weight' else biases
        target[entry['network']].append(tensor)

    networks = {}
    for name, spec in header['networks'].items():
        networks[name] = Mlp(spec['layer_dims'], weights[name], biases[name],
                             spec['hidden_activation'], spec['output_activation'])

    logger.info(f"[CHECKPOINT] Loaded {list(networks)} from {path}")
    return networks, header.get('metadata', {})
