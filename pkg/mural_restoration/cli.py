"""Command line interface.

Every subcommand takes `--config <file>` plus overrides; logs go to stderr
and machine outputs only to files. Exit codes:

| code | meaning |
|---|---|
| 0 | success |
| 1 | any other failure |
| 2 | missing checkpoint (or a usage error) |
| 3 | invalid configuration |
| 4 | NaN or infinite values aborted the run |
| 5 | output directory locked by another run |

"""
import argparse
import logging
import os
from pathlib import Path

from dotenv import find_dotenv, load_dotenv

from mural_restoration.checkpoint import MissingCheckpointError
from mural_restoration.config import Config, ConfigError, load_config
from mural_restoration.contour import (DegenerateImageError, extract_contour,
                                       read_mask, write_mask)
from mural_restoration.dataset import crop_directory, read_index, synth_dataset
from mural_restoration.diffusion import NonFiniteError, make_schedule
from mural_restoration.image import read_image
from mural_restoration.logger import get_mural_logger, log_stage
from mural_restoration.manifest import RunManifest
from mural_restoration.metrics import evaluate_files, write_report
from mural_restoration.oracle import load_oracle_spec, oracle_check
from mural_restoration.path import OutputLockedError, atomic_write_text
from mural_restoration.pipeline import (PIPELINE_STAGES, StageError,
                                        run_pipeline, train_collaborators,
                                        train_denoisers)
from mural_restoration.restore import metric_options, run_restore
from mural_restoration.serialize import to_json
from mural_restoration.seeds import stage_seed

__all__ = ['main', 'build_parser', 'exit_code', 'EXIT_OK', 'EXIT_FAILURE',
           'EXIT_MISSING_CHECKPOINT', 'EXIT_CONFIG', 'EXIT_NON_FINITE',
           'EXIT_LOCKED']

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_CHECKPOINT = 2
EXIT_CONFIG = 3
EXIT_NON_FINITE = 4
EXIT_LOCKED = 5

_log = logging.getLogger(__name__)


def exit_code(exc: BaseException) -> int:
    """Maps an exception (or a failed stage's cause) to an exit code."""
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, MissingCheckpointError):
        return EXIT_MISSING_CHECKPOINT
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NonFiniteError):
        return EXIT_NON_FINITE
    if isinstance(exc, OutputLockedError):
        return EXIT_LOCKED
    return EXIT_FAILURE


def _scales(text: str) -> 'list[int]':
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f'Invalid scale list {text}') \
            from exc


def _manifest_path(output: 'str|Path') -> Path:
    output = Path(output)
    return output.with_name(f'{output.stem}.manifest.json')


# -- commands ---------------------------------------------------------------

def cmd_extract_contour(args, config: Config) -> int:
    img = read_image(args.input)
    region = read_mask(args.region).as_bool() if args.region else None
    mask = extract_contour(img, seed=config.seed, invert=args.invert,
                           allow_degenerate=args.allow_degenerate,
                           region=region)
    write_mask(mask, args.output)
    _log.info('Contour covers %.1f%% of %s', 100 * mask.fraction, args.input)
    return EXIT_OK


def cmd_synth(args, config: Config) -> int:
    count = args.count or (config.train_count if args.split == 'train'
                           else config.test_count)
    synth_dataset(args.out, count, config.seed, args.split,
                  args.size or config.canvas_size)
    return EXIT_OK


def cmd_crop(args, config: Config) -> int:
    crop_directory(args.input, args.out, config.scales, config.overlap,
                   config.black_threshold, config.black_fraction_max)
    return EXIT_OK


def cmd_train(args, config: Config) -> int:
    tags = read_index(args.index) if args.index else {}
    manifest = RunManifest.start('train', config)
    try:
        with manifest.stage('train'):
            train_denoisers(config, args.crops, args.checkpoint_dir, tags,
                            manifest, only=args.scale)
    finally:
        manifest.finish(Path(args.checkpoint_dir) / 'train.manifest.json')
    return EXIT_OK


def cmd_train_diffusers(args, config: Config) -> int:
    tags = read_index(args.index) if args.index else {}
    manifest = RunManifest.start('train-diffusers', config)
    try:
        with manifest.stage('train_diffusers'):
            trace = train_collaborators(config, args.crops,
                                        args.checkpoint_dir, tags, manifest)
        if trace:
            _log.info('Diffuser loss %.6g -> %.6g', trace[0], trace[-1])
    finally:
        manifest.finish(Path(args.checkpoint_dir) /
                        'train-diffusers.manifest.json')
    return EXIT_OK


def cmd_restore(args, config: Config) -> int:
    manifest = RunManifest.start('restore', config)
    try:
        with manifest.stage('restore'):
            _, report = run_restore(
                config, args.input, args.output, args.checkpoint_dir,
                mask=args.mask, reference=args.reference, fdp=args.fdp,
                steps=args.steps, dump_influence=args.dump_influence,
                manifest=manifest)
        if report is not None:
            report_path = Path(args.output).with_suffix('.metrics.json')
            write_report([(Path(args.output).name, report)], report_path)
            manifest.add_output(report_path)
    finally:
        manifest.finish(args.manifest or _manifest_path(args.output))
    return EXIT_OK


def cmd_evaluate(args, config: Config) -> int:
    evaluate_files(args.repaired, args.reference, args.mask, args.out,
                   **metric_options(config))
    return EXIT_OK


def cmd_oracle_check(args, config: Config) -> int:
    spec, shape = load_oracle_spec(args.spec)
    sched = make_schedule(args.steps, sigma_mode=config.sigma_mode)
    report = oracle_check(spec, sched, args.samples,
                          stage_seed(config.seed, 'oracle'), shape)
    atomic_write_text(args.report, to_json(report) + '\n')
    return EXIT_OK


def cmd_pipeline(args, config: Config) -> int:
    run_pipeline(config, args.out, resume=args.resume,
                 stop_after=args.stop_after)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='Flat key = value config file.')
    parser.add_argument('--seed', type=int, help='Root seed override.')
    parser.add_argument('--log-level', default=os.getenv('LOG_LEVEL', 'INFO'),
                        help='Logging level (default LOG_LEVEL or INFO).')
    parser.add_argument('--log-format', choices=('csv', 'json'),
                        default=os.getenv('LOG_FORMAT', 'csv'),
                        help='Log line format (default LOG_FORMAT or csv).')
    parser.add_argument('--log-file', help='Also log to a rotating file.')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mural-restoration',
        description='Multi-scale collaborative diffusion mural restoration.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('extract-contour',
                       help='Two-cluster contour mask of an image.')
    _common(p)
    p.add_argument('--input', required=True)
    p.add_argument('--output', required=True)
    p.add_argument('--region', help='Mask restricting the clustered pixels.')
    p.add_argument('--invert', action='store_true',
                   help='Mark the lighter cluster.')
    p.add_argument('--allow-degenerate', action='store_true',
                   help='Write an empty mask for single-color input.')
    p.set_defaults(handler=cmd_extract_contour)

    p = sub.add_parser('synth', help='Synthetic clean/mask/damaged triples.')
    _common(p)
    p.add_argument('--count', type=int)
    p.add_argument('--out', required=True)
    p.add_argument('--split', choices=('train', 'test'), default='train')
    p.add_argument('--size', type=int, help='Canvas size override.')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('crop', help='Overlapping multi-scale patches.')
    _common(p)
    p.add_argument('--input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--scales', type=_scales)
    p.add_argument('--overlap', type=float)
    p.set_defaults(handler=cmd_crop)

    p = sub.add_parser('train', help='Train the per-scale denoisers.')
    _common(p)
    p.add_argument('--crops', required=True)
    p.add_argument('--checkpoint-dir', required=True)
    p.add_argument('--index', help='Split directory with index.tsv tags.')
    p.add_argument('--scale', type=_scales, help='Only these scales.')
    p.add_argument('--steps', type=int, dest='train_steps')
    p.add_argument('--lambda', type=float, dest='lambda_reward')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('train-diffusers',
                       help='Train the dynamic diffusers.')
    _common(p)
    p.add_argument('--crops', required=True)
    p.add_argument('--checkpoint-dir', required=True)
    p.add_argument('--index', help='Split directory with index.tsv tags.')
    p.add_argument('--steps', type=int, dest='diffuser_steps')
    p.set_defaults(handler=cmd_train_diffusers)

    p = sub.add_parser('restore', help='Restore one damaged image.')
    _common(p)
    p.add_argument('--input', required=True)
    p.add_argument('--mask', default='auto',
                   help='Mask file or `auto` for the sibling mask/ file.')
    p.add_argument('--checkpoint-dir', required=True)
    p.add_argument('--output', required=True)
    p.add_argument('--steps', type=int, help='Sampling steps.')
    p.add_argument('--fdp', help='Filter file or `off`.')
    p.add_argument('--reference',
                   help='Clean image, or `auto` for the sibling clean/ file.')
    p.add_argument('--dump-influence', help='Directory for influence maps.')
    p.add_argument('--manifest', help='Run manifest path.')
    p.add_argument('--condition-guidance', choices=('on', 'off'))
    p.set_defaults(handler=cmd_restore)

    p = sub.add_parser('evaluate', help='Metrics of restored images.')
    _common(p)
    p.add_argument('--repaired', required=True)
    p.add_argument('--reference', required=True)
    p.add_argument('--mask')
    p.add_argument('--out', required=True, help='report.csv or report.json')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('oracle-check',
                       help='Sampler check against analytic predictors.')
    _common(p)
    p.add_argument('--spec', required=True)
    p.add_argument('--steps', type=int, required=True)
    p.add_argument('--samples', type=int, required=True)
    p.add_argument('--report', required=True)
    p.set_defaults(handler=cmd_oracle_check)

    p = sub.add_parser('pipeline', help='End-to-end synthetic run.')
    _common(p)
    p.add_argument('--out', required=True)
    p.add_argument('--resume', action='store_true')
    p.add_argument('--stop-after', choices=PIPELINE_STAGES)
    p.add_argument('--lambda', type=float, dest='lambda_reward')
    p.set_defaults(handler=cmd_pipeline)
    return parser


def _overrides(args) -> dict:
    overrides = {'seed': args.seed}
    for key in ('train_steps', 'lambda_reward', 'diffuser_steps', 'overlap'):
        overrides[key] = getattr(args, key, None)
    if getattr(args, 'scales', None):
        overrides['scales'] = tuple(args.scales)
    guidance = getattr(args, 'condition_guidance', None)
    if guidance is not None:
        overrides['condition_guidance'] = guidance == 'on'
    return overrides


def main(argv: 'list[str]|None' = None) -> int:
    """Runs a subcommand and returns its exit code.

    A local `.env` file is read first, so `LOG_LEVEL`, `LOG_FORMAT`,
    `LOG_VERBOSE` and `MURAL_SEED` may come from it.

    """
    load_dotenv(find_dotenv(usecwd=True), override=False)
    args = build_parser().parse_args(argv)
    get_mural_logger(args.log_file, log_level=args.log_level,
                     format=args.log_format)
    try:
        config = load_config(args.config, **_overrides(args))
        with log_stage(args.command):
            return args.handler(args, config)
    except StageError as exc:
        _log.error('Stage %s failed: %s', exc.stage, exc.cause)
        return exit_code(exc)
    except (MissingCheckpointError, ConfigError, NonFiniteError,
            OutputLockedError, DegenerateImageError) as exc:
        _log.error('%s', exc)
        return exit_code(exc)
    except Exception as exc:
        _log.exception('%s failed: %s', args.command, exc)
        return EXIT_FAILURE
