"""
Utility functions for experiment bookkeeping and reporting
Seed splitting, report export and plot-data CSV emission
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SOFTWARE_VERSION = '1.0.0'
REPORT_FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

EM_TRACE_COLUMNS = ['iteration', 'L_diff', 'L_PR', 'mae_in', 'rmse_in', 'mre_in']
PHASE1_COLUMNS = ['epoch', 'loss']
MRE_COLUMNS = ['iteration', 'mre_in']
SWEEP_COLUMNS = ['guidance_scale', 'mae', 'rmse', 'mre_percent']


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode('utf-8'):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(master_seed: int, stage: str, replicate: int = 0) -> int:
    """
    Stage seed = splitmix64(splitmix64(master ^ fnv1a(stage)) ^ replicate)

    Each stage's stream depends only on its own name, so adding a stage
    leaves the others untouched.
    """
    return _splitmix64(_splitmix64((master_seed ^ _fnv1a(stage)) & _MASK64) ^ (replicate & _MASK64))


def stage_rng(master_seed: int, stage: str, replicate: int = 0) -> np.random.Generator:
    """Random generator for one pipeline stage"""
    return np.random.default_rng(derive_seed(master_seed, stage, replicate))


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, default=_json_default)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def export_report_json(report: Dict[str, Any], filename: str = 'report.json') -> str:
    """
    Export a report as canonical JSON

    Args:
        report: Report dictionary
        filename: Output filename

    Returns:
        The path written
    """
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filename, 'w', encoding='utf-8') as f:
        f.write(canonical_json(report) + '\n')
    logger.info(f"[REPORT] Report exported to {filename}")
    return filename


def write_trace_csv(path: str, rows: Sequence[Dict[str, Any]], columns: List[str]) -> str:
    """Write dict rows as CSV with a fixed column order; no rows gives a header-only file"""
    frame = pd.DataFrame(list(rows), columns=columns)
    frame.to_csv(path, index=False)
    return path


def emit_plot_data(report: Dict[str, Any], traces: Dict[str, Any], out_dir: str) -> Dict[str, str]:
    """
    Write the CSVs behind the loss, MRE and guidance-scale plots

    Args:
        report: Run report; its 'trace_files' entry is filled in
        traces: 'phase1' (loss per epoch), 'em' (EM trace rows) and,
            when a sweep was configured, 'guidance_sweep' rows
        out_dir: Output directory

    Returns:
        Mapping of trace name to file path
    """
    os.makedirs(out_dir, exist_ok=True)
    phase1 = [{'epoch': i + 1, 'loss': loss} for i, loss in enumerate(traces.get('phase1') or [])]
    em_rows = traces.get('em') or []

    paths = {
        'phase1_loss': write_trace_csv(os.path.join(out_dir, 'phase1_loss.csv'), phase1, PHASE1_COLUMNS),
        'em_trace': write_trace_csv(os.path.join(out_dir, 'em_trace.csv'), em_rows, EM_TRACE_COLUMNS),
        'mre_trace': write_trace_csv(os.path.join(out_dir, 'mre_trace.csv'), em_rows, MRE_COLUMNS),
    }
    if traces.get('guidance_sweep') is not None:
        paths['guidance_sweep'] = write_trace_csv(os.path.join(out_dir, 'guidance_sweep.csv'),
                                                  traces['guidance_sweep'], SWEEP_COLUMNS)

    report['trace_files'] = {name: os.path.basename(path) for name, path in paths.items()}
    logger.info(f"[REPORT] Plot data written: {sorted(paths)}")
    return paths


def print_metrics(metrics: Dict[str, Dict[str, Any]]) -> None:
    """Print a metrics table to the console"""
    print(f"\n{'='*80}")
    print("Imputation Metrics")
    print(f"{'='*80}")
    print(f"{'Scope':<28} {'RMSE':<12} {'MAE':<12} {'MRE %':<12} {'Entries':<10}")
    print(f"{'-'*80}")
    for scope, row in metrics.items():
        mre = row.get('mre_percent')
        mre_text = 'n/a' if mre is None else f"{mre:.2f}"
        print(f"{scope:<28} {row['rmse']:<12.4f} {row['mae']:<12.4f} {mre_text:<12} {row['eval_entry_count']:<10}")
    print(f"{'='*80}\n")


def print_run_summary(report: Dict[str, Any], out_dir: Optional[str] = None) -> None:
    """Print the headline numbers of a run report"""
    print(f"\n{'='*80}")
    print(f"Run Summary (config {report.get('config_hash', '')[:12]})")
    print(f"{'='*80}")
    print(f"Baseline mode: {report.get('baseline_mode')}")
    for split_name, info in (report.get('missing_ratios') or {}).items():
        print(f"Missing ratio [{split_name}]: realized {info['realized']:.4f}, "
              f"expected {info['expected']:.4f} ± {info['sigma']:.4f}")
    if report.get('recognizer_auc') is not None:
        print(f"Recognizer ROC-AUC (held out): {report['recognizer_auc']:.4f}")
    if report.get('w2') is not None:
        print(f"W2 (out of sample): {report['w2']:.4f}")
    if out_dir:
        print(f"Outputs: {out_dir}")
    print(f"{'='*80}")
    if report.get('metrics'):
        print_metrics(report['metrics'])
