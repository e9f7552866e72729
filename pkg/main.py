"""
Main orchestration script for imputation experiments
Coordinates data preparation, mechanism injection, Phase-1 pre-training, EM
and evaluation, and writes the run report with its plot data
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from config_loader import ConfigError, ExperimentConfig, parse_config
from data_loader import (MaskedDataset, NormStats, compute_norm_stats, generate_ar1_series, load_csv, save_csv,
                         split, split_timeline, standardize, unstandardize, window_series)
from diffusion import Denoiser, build_schedule, pretrain_phase1, prior_gap
from em_engine import EmConfig, EmState, e_step, impute_out_of_sample, run_em
from evaluation import compute_metrics, roc_auc, wasserstein2_exact
from logger_setup import setup_logging
from missing_mechanisms import MechanismSpec, expected_missing_ratio, generate_artificial, generate_mask
from pattern_recognizer import PatternRecognizer, pr_predict
from utils import (REPORT_FORMAT_VERSION, SOFTWARE_VERSION, derive_seed, emit_plot_data, export_report_json,
                   print_metrics, print_run_summary, stage_rng)

logger = logging.getLogger(__name__)

SPLIT_NAMES = ('train', 'valid', 'test')


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the report so far"""

    def __init__(self, stage: str, partial_report: Dict[str, Any], cause: Exception):
        self.stage = stage
        self.partial_report = partial_report
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class ImputationExperiment:
    """Runs one configured experiment end to end"""

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[str] = None, threads: Optional[int] = None):
        """
        Args:
            cfg: Validated experiment config
            out_dir: Output directory (output.dir when None)
            threads: E-step worker threads (em.threads when None)
        """
        self.cfg = cfg
        self.seed = int(cfg.get('seed'))
        self.out_dir = out_dir or cfg.resolve_path(cfg.get('output.dir'))
        em_section = dict(cfg.get_section('em'))
        if threads is not None:
            em_section['threads'] = int(threads)
        self.em_cfg = EmConfig.from_dict(em_section)
        self.spec = MechanismSpec(cfg.get('mechanism.kind'), cfg.get('mechanism.params'))
        self.sched = build_schedule(cfg.get('schedule.T'), cfg.get('schedule.beta_min'),
                                    cfg.get('schedule.beta_max'), cfg.get('schedule.kind'))

        self.raw: Optional[MaskedDataset] = None
        self.windowed = False
        self.blocks: List[Tuple[int, int]] = []
        self.splits: Dict[str, Optional[MaskedDataset]] = {}
        self.stats: Optional[NormStats] = None
        self.test_artificial: Optional[np.ndarray] = None
        self.denoiser: Optional[Denoiser] = None
        self.state: Optional[EmState] = None
        self.test_imputed: Optional[np.ndarray] = None
        self.traces: Dict[str, Any] = {}
        self.report: Dict[str, Any] = {
            'software_version': SOFTWARE_VERSION,
            'report_format_version': REPORT_FORMAT_VERSION,
            'config': cfg.data,
            'config_hash': cfg.config_hash(),
            'defaults_applied': cfg.defaults_applied,
            'seed': self.seed,
            'baseline_mode': self.em_cfg.is_baseline,
            'stages': {},
            'timings': {},
        }

    def _run_stage(self, name: str, func: Callable[[], Any]) -> Any:
        logger.info(f"\n--- Stage: {name} ---")
        started = time.perf_counter()
        try:
            result = func()
        except Exception as e:
            logger.error(f"[{name}] Stage failed: {e}")
            self.report['failed_stage'] = name
            raise PipelineStageError(name, self.report, e) from e
        self.report['timings'][name] = time.perf_counter() - started
        self.report['stages'][name] = 'ok'
        return result

    def _to_data_space(self, z: np.ndarray) -> np.ndarray:
        if self.cfg.get('evaluation.data_space'):
            return unstandardize(z, self.stats)
        return z

    # Data preparation

    def _load_source(self) -> Tuple[MaskedDataset, bool]:
        """Raw data before any split: ([n_steps x K] timeline, True) or (table, False)"""
        if self.cfg.get('data.source') == 'synthetic':
            syn = self.cfg.get_section('data').get('synthetic')
            series = generate_ar1_series(int(syn['n_steps']), int(syn['n_features']), float(syn['ar_coef']),
                                         float(syn['noise_std']), stage_rng(self.seed, 'data'))
            logger.info(f"[DATA] Generated AR(1) series of shape {series.shape}")
            return MaskedDataset(series, np.ones_like(series)), True

        csv_cfg = self.cfg.get_section('data')['csv']
        table = load_csv(self.cfg.resolve_path(csv_cfg['path']), csv_cfg['has_header'], csv_cfg['missing_token'])
        return table, bool(self.cfg.get('data.window.enabled'))

    def load_data(self) -> MaskedDataset:
        """Load or generate the raw data and check that the training split can hold rows"""
        self.raw, self.windowed = self._load_source()
        ratios = self.cfg.get('data.split.ratios')
        if self.windowed:
            window_len = int(self.cfg.get('data.window.window_len'))
            self.blocks = split_timeline(self.raw.n_rows, ratios)
            start, stop = self.blocks[0]
            if stop - start < window_len:
                raise ValueError(f"Training split is empty: {stop - start} training steps, window length {window_len}")
        elif self.raw.n_rows == 0:
            raise ValueError("Training split is empty")
        return self.raw

    def _cut_splits(self, raw: MaskedDataset) -> Dict[str, Optional[MaskedDataset]]:
        ratios = self.cfg.get('data.split.ratios')
        if self.windowed:
            window_len = int(self.cfg.get('data.window.window_len'))
            stride = int(self.cfg.get('data.window.stride'))
            series = np.where(raw.known == 1.0, raw.x, np.nan)
            splits = {}
            for name, (start, stop) in zip(SPLIT_NAMES, self.blocks):
                splits[name] = window_series(series[start:stop], window_len, stride, mask=raw.m[start:stop],
                                             known=raw.known[start:stop]) if stop - start >= window_len else None
            self.report['split_note'] = 'mask drawn on the timeline, then split into contiguous blocks and windowed'
            return splits

        parts = split(raw, ratios, derive_seed(self.seed, 'split'), self.cfg.get('data.split.shuffle'))
        self.report['split_note'] = 'mask drawn on the full table, then rows split'
        return {name: (part if part.n_rows else None) for name, part in zip(SPLIT_NAMES, parts)}

    def inject_mechanism(self) -> Dict[str, Dict[str, float]]:
        """
        Apply the configured missing mechanism to the raw data, then split

        The mask is drawn once over the whole timeline (or table), so an entry
        shared by overlapping windows is missing in all of them or in none.
        """
        raw = self.raw
        on_standardized = bool(self.cfg.get('mechanism.on_standardized'))
        if on_standardized:
            truth_stats = compute_norm_stats(raw.with_masks(m=raw.known))
            values = np.where(raw.known == 1.0, (raw.x - truth_stats.mean) / truth_stats.std, 0.0)
        else:
            values = raw.x
        sample = generate_mask(self.spec, values, stage_rng(self.seed, 'mechanism'))
        masked = raw.with_masks(m=raw.m * sample.mask)
        self.splits = self._cut_splits(masked)
        if self.splits.get('train') is None:
            raise ValueError("Training split is empty")
        self.report['split_rows'] = {name: (0 if ds is None else ds.n_rows) for name, ds in self.splits.items()}

        ratios = {}
        for index, name in enumerate(SPLIT_NAMES):
            ds = self.splits.get(name)
            if ds is None:
                continue
            # the oracle sees rows with features as columns: the timeline block or the table rows
            if self.windowed:
                start, stop = self.blocks[index]
                source = values[start:stop]
            elif on_standardized:
                source = np.where(ds.known == 1.0, (ds.x - truth_stats.mean) / truth_stats.std, 0.0)
            else:
                source = ds.x
            expected, sigma = expected_missing_ratio(self.spec, source)
            realized = float(ds.original_missing_mask().mean())
            ratios[name] = {
                'realized': realized,
                'expected': expected,
                'sigma': sigma,
                'total_missing': ds.missing_ratio(),
            }
            logger.info(f"[MECHANISM] {name}: realized {realized:.4f}, expected {expected:.4f} ± {sigma:.4f}")

        self.report['mechanism'] = self.spec.to_dict()
        self.report['mechanism_realized_overall'] = sample.realized_missing_ratio
        self.report['missing_ratios'] = ratios
        return ratios

    def standardize_splits(self) -> NormStats:
        """Standardize every split with training statistics; draw artificial masks"""
        train, self.stats = standardize(self.splits['train'])
        for name in ('valid', 'test'):
            if self.splits.get(name) is not None:
                self.splits[name], _ = standardize(self.splits[name], self.stats)

        fraction = float(self.cfg.get('phase1.artificial_fraction'))
        scheme = self.cfg.get('phase1.artificial_scheme')
        a_train = generate_artificial(scheme, train.m, fraction, train.axis_meta, stage_rng(self.seed, 'artificial'))
        self.splits['train'] = train.with_masks(a=a_train)

        test = self.splits.get('test')
        if test is not None:
            self.test_artificial = generate_artificial(scheme, test.m, fraction, test.axis_meta,
                                                       stage_rng(self.seed, 'artificial', 2))
        self.report['norm_stats'] = self.stats.to_dict()
        return self.stats

    # Training

    def pretrain(self) -> List[float]:
        """Phase 1: conditional diffusion pre-training"""
        train = self.splits['train']
        den_cfg = self.cfg.get_section('denoiser')
        denoiser = Denoiser.initialize(train.n_cols, den_cfg['hidden_dims'], int(den_cfg['embed_dim']),
                                       den_cfg['activation'], stage_rng(self.seed, 'denoiser_init'))
        self.denoiser, loss_trace = pretrain_phase1(train, self.cfg.get_section('phase1'), self.sched,
                                                    stage_rng(self.seed, 'phase1'), denoiser)
        self.traces['phase1'] = loss_trace
        return loss_trace

    def train_em(self) -> EmState:
        """Phase 2: joint EM over denoiser and recognizer"""
        train = self.splits['train']
        section = dict(self.cfg.get_section('recognizer'))
        if self.em_cfg.is_baseline:
            section['init'] = 'zeros'
        recognizer = PatternRecognizer.from_config(train.n_cols, section, stage_rng(self.seed, 'recognizer_init'))
        checkpoint_dir = os.path.join(self.out_dir, 'checkpoints') if self.cfg.get('output.checkpoint') else None
        self.state = run_em(self.denoiser, recognizer, train, self.sched, self.em_cfg, stage_rng(self.seed, 'em'),
                            self._to_data_space, checkpoint_dir)
        self.traces['em'] = self.state.trace
        last = self.state.trace[-1]
        self.report['em_final'] = {'L_diff': last['L_diff'], 'L_PR': last['L_PR']}
        return self.state

    # Evaluation

    def _metrics(self, ds: MaskedDataset, imputed: np.ndarray, eval_mask: np.ndarray, scope: str) -> Dict[str, Any]:
        report = compute_metrics(self._to_data_space(ds.x), self._to_data_space(imputed), eval_mask, scope)
        logger.info(f"[EVAL] {report}")
        return report.to_dict()

    def evaluate(self) -> Dict[str, Dict[str, Any]]:
        """Metrics for every scope that has evaluable entries"""
        metrics = {}
        train = self.splits['train']
        if train.original_missing_mask().sum() > 0:
            metrics['original_in_sample'] = self._metrics(train, self.state.imputed, train.original_missing_mask(),
                                                          'original_in_sample')

        test = self.splits.get('test')
        if test is not None:
            self.test_imputed = impute_out_of_sample(self.state, test.x * test.m, test.m, self.sched, self.em_cfg,
                                                     stage_rng(self.seed, 'impute_test'))
            if test.original_missing_mask().sum() > 0:
                metrics['original_out_of_sample'] = self._metrics(test, self.test_imputed,
                                                                  test.original_missing_mask(),
                                                                  'original_out_of_sample')
            if self.test_artificial is not None and self.test_artificial.sum() > 0:
                cond_m = test.m - self.test_artificial
                imputed_art = impute_out_of_sample(self.state, test.x * cond_m, cond_m, self.sched, self.em_cfg,
                                                   stage_rng(self.seed, 'impute_artificial'))
                metrics['artificial'] = self._metrics(test, imputed_art, self.test_artificial, 'artificial')

        self.report['metrics'] = metrics
        return metrics

    def evaluate_distribution(self) -> Optional[float]:
        """Exact W2 between imputed and true test rows, plus recognizer AUC"""
        test = self.splits.get('test')
        if test is None or self.test_imputed is None:
            return None

        completed = np.where(test.known == 1.0, test.x, self.test_imputed)
        auc = roc_auc(pr_predict(self.state.recognizer, completed), test.m)
        self.report['recognizer_auc'] = auc

        if self.cfg.get('evaluation.w2') and np.all(test.known == 1.0):
            n = min(test.n_rows, int(self.cfg.get('evaluation.w2_max_points')))
            w2 = wasserstein2_exact(self._to_data_space(self.test_imputed[:n]), self._to_data_space(test.x[:n]))
            self.report['w2'] = w2
            self.report['w2_note'] = f"flattened rows, first {n} test rows"
            return w2
        self.report['w2'] = None
        return None

    def guidance_sweep(self) -> Optional[List[Dict[str, Any]]]:
        """Out-of-sample imputation at each configured guidance scale"""
        scales = self.cfg.get('evaluation.guidance_sweep') or []
        test = self.splits.get('test')
        if not scales or test is None or test.original_missing_mask().sum() == 0:
            return None
        rows = []
        for index, scale in enumerate(scales):
            sweep_cfg = self.em_cfg.replace(guidance_scale=float(scale))
            imputed = e_step(self.state, test.x * test.m, test.m, self.sched, sweep_cfg,
                             stage_rng(self.seed, 'guidance_sweep', index))
            result = self._metrics(test, imputed, test.original_missing_mask(), 'original_out_of_sample')
            rows.append({'guidance_scale': float(scale), 'mae': result['mae'], 'rmse': result['rmse'],
                         'mre_percent': result['mre_percent']})
        self.traces['guidance_sweep'] = rows
        self.report['guidance_sweep'] = rows
        return rows

    def check_prior_gap(self) -> Dict[str, Any]:
        """Terminal-marginal mismatch to N(0, I) on the training data"""
        train = self.splits['train']
        gap = prior_gap(train.x, self.sched, train.m)
        self.report['prior_gap'] = {'kl': gap.kl, 'max_abs_mean': float(np.max(np.abs(gap.mean))),
                                    'max_var': float(np.max(gap.var))}
        return self.report['prior_gap']

    def write_outputs(self) -> str:
        """Checkpoint, plot data and the report"""
        os.makedirs(self.out_dir, exist_ok=True)
        if self.cfg.get('output.checkpoint'):
            metadata = {
                'norm_stats': self.stats.to_dict(),
                'schedule': self.sched.to_dict(),
                'embed_dim': self.state.denoiser.embed_dim,
                'em': self.em_cfg.to_dict(),
                'axis_meta': list(self.splits['train'].axis_meta or []),
                'config_hash': self.report['config_hash'],
            }
            path = save_checkpoint(os.path.join(self.out_dir, 'model.ckpt'),
                                   {'denoiser': self.state.denoiser.net, 'recognizer': self.state.recognizer.net},
                                   metadata)
            self.report['checkpoint'] = os.path.basename(path)
        emit_plot_data(self.report, self.traces, self.out_dir)
        return export_report_json(self.report, os.path.join(self.out_dir, 'report.json'))

    def run_full_pipeline(self) -> Dict[str, Any]:
        """
        Run every stage in order

        Returns:
            Run report
        """
        logger.info("=" * 80)
        logger.info(f"Starting imputation experiment (config {self.report['config_hash'][:12]}, seed {self.seed})")
        logger.info("=" * 80)

        self._run_stage('data', self.load_data)
        self._run_stage('mechanism', self.inject_mechanism)
        self._run_stage('standardize', self.standardize_splits)
        self._run_stage('phase1', self.pretrain)
        self._run_stage('em', self.train_em)
        self._run_stage('evaluate', self.evaluate)
        self._run_stage('distribution', self.evaluate_distribution)
        self._run_stage('guidance_sweep', self.guidance_sweep)
        self._run_stage('prior_gap', self.check_prior_gap)
        self._run_stage('report', self.write_outputs)

        logger.info("\n" + "=" * 80)
        logger.info("Experiment completed successfully")
        logger.info(f"Total duration: {sum(self.report['timings'].values()):.2f} seconds")
        logger.info("=" * 80)
        return self.report


def run_pipeline(cfg: ExperimentConfig, out_dir: Optional[str] = None, threads: Optional[int] = None) -> Dict[str, Any]:
    """
    Run a configured experiment and write its outputs

    Raises PipelineStageError naming the failed stage; the partial report is
    written before raising.
    """
    experiment = ImputationExperiment(cfg, out_dir, threads)
    try:
        return experiment.run_full_pipeline()
    except PipelineStageError as e:
        export_report_json(e.partial_report, os.path.join(experiment.out_dir, 'report.json'))
        raise


def dry_run_masks(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> Dict[str, Any]:
    """Data and mechanism stages only; writes one mask CSV per split"""
    experiment = ImputationExperiment(cfg, out_dir)
    experiment.load_data()
    ratios = experiment.inject_mechanism()
    os.makedirs(experiment.out_dir, exist_ok=True)
    for name, ds in experiment.splits.items():
        if ds is not None:
            save_csv(os.path.join(experiment.out_dir, f"mask_{name}.csv"), ds.m)
    return ratios


def impute_csv(checkpoint_path: str, csv_path: str, out_path: str, seed: int = 0, has_header: bool = False,
               threads: Optional[int] = None) -> np.ndarray:
    """
    Impute the missing cells of a CSV with a trained checkpoint

    Rows must already have the model's width (windowed rows for series models).
    """
    networks, metadata = load_checkpoint(checkpoint_path)
    stats = NormStats.from_dict(metadata['norm_stats'])
    sched_meta = metadata['schedule']
    sched = build_schedule(sched_meta['T'], sched_meta['beta_min'], sched_meta['beta_max'], sched_meta['kind'])
    em_section = dict(metadata['em'])
    if threads is not None:
        em_section['threads'] = int(threads)
    em_cfg = EmConfig.from_dict(em_section)

    denoiser = Denoiser(networks['denoiser'], networks['denoiser'].output_dim, int(metadata['embed_dim']))
    state = EmState(denoiser, PatternRecognizer(networks['recognizer']), em_cfg)

    ds, _ = standardize(load_csv(csv_path, has_header), stats)
    imputed = impute_out_of_sample(state, ds.x * ds.m, ds.m, sched, em_cfg, stage_rng(seed, 'impute'))
    values = unstandardize(imputed, stats)
    save_csv(out_path, values)
    logger.info(f"[IMPUTE] Wrote {values.shape[0]} rows to {out_path}")
    return values


def read_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    with open(path, 'r', encoding='utf-8') as f:
        cfg = parse_config(f.read(), os.path.dirname(os.path.abspath(path)))
    return cfg.with_overrides(seed=seed) if seed is not None else cfg


def build_parser() -> argparse.ArgumentParser:
    # Shared flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Override the master seed')
    common.add_argument('--out-dir', default=argparse.SUPPRESS, help='Output directory')
    common.add_argument('--threads', type=int, default=argparse.SUPPRESS, help='E-step worker threads')

    parser = argparse.ArgumentParser(description='Diffusion imputation with a missing-pattern recognizer',
                                     parents=[common])
    parser.set_defaults(seed=None, out_dir=None, threads=None)
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run a full experiment', parents=[common])
    run.add_argument('config', help='Experiment config (JSON)')

    impute = sub.add_parser('impute', help='Impute a CSV with a trained checkpoint', parents=[common])
    impute.add_argument('checkpoint')
    impute.add_argument('csv')
    impute.add_argument('--out', required=True, help='Output CSV')
    impute.add_argument('--header', action='store_true', help='Input CSV has a header row')

    masks = sub.add_parser('masks', help='Generate masks only (mechanism dry run)', parents=[common])
    masks.add_argument('config')

    metrics = sub.add_parser('metrics', help='Score a prediction against ground truth', parents=[common])
    metrics.add_argument('true_csv')
    metrics.add_argument('pred_csv')
    metrics.add_argument('mask_csv', help='1 marks entries to evaluate')
    metrics.add_argument('--scope', default='original_out_of_sample')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)

    stage = args.command
    try:
        if args.command == 'run':
            stage = 'config'
            cfg = read_config(args.config, args.seed)
            setup_logging(cfg.get_section('logging'))
            report = run_pipeline(cfg, args.out_dir, args.threads)
            print_run_summary(report, args.out_dir or cfg.resolve_path(cfg.get('output.dir')))

        elif args.command == 'masks':
            stage = 'config'
            cfg = read_config(args.config, args.seed)
            setup_logging(cfg.get_section('logging'))
            stage = 'masks'
            ratios = dry_run_masks(cfg, args.out_dir)
            print(json.dumps(ratios, indent=2, sort_keys=True))

        elif args.command == 'impute':
            setup_logging()
            impute_csv(args.checkpoint, args.csv, args.out, args.seed or 0, args.header, args.threads)

        elif args.command == 'metrics':
            setup_logging()
            truth, pred, mask = (load_csv(p) for p in (args.true_csv, args.pred_csv, args.mask_csv))
            report = compute_metrics(truth.x, pred.x, mask.x, args.scope)
            print_metrics({report.scope: report.to_dict()})

    except PipelineStageError as e:
        print(f"[{e.stage}] {e.cause}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"[{stage}] {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
