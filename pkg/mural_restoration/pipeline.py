"""End-to-end run over synthetic murals.

Stages run in order, each writing its artifacts under the output
directory:

| stage | artifacts |
|---|---|
| synth | `data/{train,test}/{clean,mask,damaged}/*.png`, `index.tsv` |
| crop | `crops/scale*/`, `crops/manifest.tsv` |
| train | `checkpoints/denoiser_scale*.pt` |
| train_diffusers | `checkpoints/diffuser_scale*.pt` |
| fdp | `checkpoints/fdp_filter.txt` |
| restore | `restored/{collaborative,mean_fill}/*.png` |
| evaluate | `reports/{collaborative,mean_fill}.{csv,json}` |
| report | `reports/summary.{csv,json}` |

A completed stage leaves a marker in `.stages/`. With `resume` the stages
whose markers exist are skipped; the configuration must be unchanged.

"""
import logging
import shutil
from pathlib import Path

import torch

from mural_restoration.checkpoint import checkpoint_path, save_checkpoint
from mural_restoration.config import (Config, ConfigError, config_hash,
                                      write_config)
from mural_restoration.contour import read_mask
from mural_restoration.dataset import (crop_directory, load_patches,
                                       read_index, synth_dataset)
from mural_restoration.fdp import save_filter
from mural_restoration.fusion import Collaborators, train_diffusers
from mural_restoration.image import read_image, write_image
from mural_restoration.logger import log_stage
from mural_restoration.manifest import MANIFEST_NAME, RunManifest
from mural_restoration.metrics import (evaluate_files, read_report,
                                       summarize, write_report,
                                       write_summary)
from mural_restoration.path import OutputLock, ensure_dir, list_files
from mural_restoration.restore import (FILTER_NAME, fit_restoration_filter,
                                       load_collaborators, load_denoisers,
                                       mean_fill, metric_options,
                                       resolve_filter, restore_image,
                                       schedule_for)
from mural_restoration.seeds import stage_seed, torch_generator
from mural_restoration.trainer import (build_denoiser, build_diffuser,
                                       denoiser_architecture,
                                       diffuser_architecture, torch_dtype,
                                       train_denoiser)

__all__ = ['PIPELINE_STAGES', 'StageError', 'Pipeline', 'run_pipeline',
           'train_denoisers', 'train_collaborators', 'FDP_FIT_COUNT',
           'CHANNELS']

PIPELINE_STAGES = ('synth', 'crop', 'train', 'train_diffusers', 'fdp',
                   'restore', 'evaluate', 'report')
MODELS = ('collaborative', 'mean_fill')
FDP_FIT_COUNT = 4
CHANNELS = 3

_log = logging.getLogger(__name__)


class StageError(Exception):
    """A pipeline stage failed.

    Attributes:
        stage (str): The failed stage.
        cause (Exception): The original error.

    """
    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f'Stage {stage} failed: {cause}')
        self.stage = stage
        self.cause = cause


def train_denoisers(config: Config,
                    crop_dir: 'str|Path',
                    checkpoint_dir: 'str|Path',
                    tags: 'dict[str, int]|None' = None,
                    manifest: 'RunManifest|None' = None,
                    only: 'list[int]|None' = None) -> None:
    """Trains and saves the denoiser of every scale (or of `only`)."""
    sched = schedule_for(config)
    dtype = torch_dtype(config.dtype)
    for index, scale in enumerate(config.scales):
        if only and scale not in only:
            continue
        patches = load_patches(crop_dir, scale, config.seed, tags, dtype)
        model = build_denoiser(config, scale, CHANNELS,
                               stage_seed(config.seed, 'init', index))
        seed = stage_seed(config.seed, 'train', index)
        train_denoiser(model, patches, sched, config, seed)
        path = checkpoint_path(checkpoint_dir, 'denoiser', scale)
        save_checkpoint(path, model, 'denoiser', scale,
                        denoiser_architecture(config, scale, CHANNELS), sched)
        if manifest is not None:
            manifest.seeds[f'train_scale{scale}'] = seed
            manifest.add_checkpoint(path)


def train_collaborators(config: Config,
                        crop_dir: 'str|Path',
                        checkpoint_dir: 'str|Path',
                        tags: 'dict[str, int]|None' = None,
                        manifest: 'RunManifest|None' = None,
                        ) -> 'list[float]':
    """Trains and saves the dynamic diffusers over the saved denoisers.

    Returns:
        The diffuser loss trace.

    """
    sched = schedule_for(config)
    predictors = load_denoisers(config, checkpoint_dir, CHANNELS, sched,
                                manifest)
    n = len(config.scales)
    diffusers = [build_diffuser(config, CHANNELS,
                                stage_seed(config.seed, 'init', n + i))
                 for i in range(n)]
    collab = Collaborators(predictors, diffusers, config.scales)
    collab.favor_canonical(config.canonical_prior)
    patches = load_patches(crop_dir, config.scales[-1], config.seed, tags,
                           torch_dtype(config.dtype))
    seed = stage_seed(config.seed, 'train_diffusers')
    trace = train_diffusers(collab, patches, sched, config.diffuser_steps,
                            config.diffuser_lr, config.batch_size,
                            torch_generator(seed))
    for scale, diffuser in zip(config.scales, diffusers):
        path = checkpoint_path(checkpoint_dir, 'diffuser', scale)
        save_checkpoint(path, diffuser, 'diffuser', scale,
                        diffuser_architecture(config, CHANNELS), sched)
        if manifest is not None:
            manifest.add_checkpoint(path)
    if manifest is not None:
        manifest.seeds['train_diffusers'] = seed
    return trace


class Pipeline:
    """The stages of one run, bound to an output directory.

    Args:
        config: The run config.
        out_dir: The output directory, owned through a lock file.

    """
    def __init__(self, config: Config, out_dir: 'str|Path') -> None:
        self.config = config
        self.out = Path(out_dir)
        self.data = self.out / 'data'
        self.crops = self.out / 'crops'
        self.checkpoints = self.out / 'checkpoints'
        self.restored = self.out / 'restored'
        self.reports = self.out / 'reports'
        self.markers = self.out / '.stages'
        self.sched = schedule_for(config)
        self.dtype = torch_dtype(config.dtype)
        self.manifest = RunManifest.start('pipeline', config)

    # -- resume bookkeeping ----------------------------------------------

    def _marker(self, stage: str) -> Path:
        return self.markers / f'{stage}.done'

    def completed(self, stage: str) -> bool:
        return self._marker(stage).is_file()

    def _mark(self, stage: str) -> None:
        ensure_dir(self.markers)
        self._marker(stage).write_text(config_hash(self.config) + '\n')

    def _prepare(self, resume: bool) -> None:
        run_config = self.out / 'config.conf'
        if resume and self.markers.is_dir():
            for marker in self.markers.glob('*.done'):
                if marker.read_text().strip() != config_hash(self.config):
                    raise ConfigError(f'Cannot resume {self.out}: completed'
                                      f' stages used a different config')
        elif self.markers.is_dir():
            shutil.rmtree(self.markers)
        write_config(self.config, run_config)
        self.manifest.add_output(run_config)

    # -- stages -----------------------------------------------------------

    def synth(self) -> None:
        cfg = self.config
        synth_dataset(self.data, cfg.train_count, cfg.seed, 'train',
                      cfg.canvas_size)
        synth_dataset(self.data, cfg.test_count, cfg.seed, 'test',
                      cfg.canvas_size)

    def crop(self) -> None:
        cfg = self.config
        crop_directory(self.data / 'train' / 'clean', self.crops, cfg.scales,
                       cfg.overlap, cfg.black_threshold,
                       cfg.black_fraction_max)

    def train(self) -> None:
        train_denoisers(self.config, self.crops, self.checkpoints,
                        read_index(self.data / 'train'), self.manifest)

    def train_diffusers(self) -> None:
        train_collaborators(self.config, self.crops, self.checkpoints,
                            read_index(self.data / 'train'), self.manifest)

    def _triples(self, split: str) -> list:
        base = self.data / split
        triples = []
        for path in list_files(base / 'damaged'):
            triples.append((path.name, read_image(path),
                            read_mask(base / 'mask' / path.name),
                            read_image(base / 'clean' / path.name)))
        return triples

    def fdp(self) -> None:
        cfg = self.config
        target = self.checkpoints / FILTER_NAME
        if not cfg.fdp:
            if target.exists():
                target.unlink()
            _log.info('FDP is off; no filter fitted')
            return
        collab = load_collaborators(cfg, self.checkpoints, CHANNELS,
                                    self.sched)
        triples = [t[1:] for t in self._triples('train')[:FDP_FIT_COUNT]]
        trace = []
        filt = fit_restoration_filter(collab, triples, cfg, self.sched,
                                      trace)
        save_filter(filt, target)
        self.manifest.add_output(target)
        if trace:
            _log.info('FDP objective %.6g -> %.6g', trace[0], trace[-1])

    def restore(self) -> None:
        cfg = self.config
        collab = load_collaborators(cfg, self.checkpoints, CHANNELS,
                                    self.sched, self.manifest)
        filt = resolve_filter(cfg, None, self.checkpoints)
        for index, (name, damaged, damage, _) in enumerate(
                self._triples('test')):
            seed = stage_seed(cfg.seed, 'restore', index)
            result = restore_image(collab, damaged, damage, cfg, seed,
                                   self.sched, fdp_filter=filt)
            outputs = {'collaborative': result.restored,
                       'mean_fill': mean_fill(damaged, damage)}
            for model, img in outputs.items():
                path = self.restored / model / name
                write_image(img, path)
                self.manifest.add_output(path)

    def evaluate(self) -> None:
        test = self.data / 'test'
        for model in MODELS:
            results = evaluate_files(self.restored / model, test / 'clean',
                                     test / 'mask',
                                     **metric_options(self.config))
            for suffix in ('csv', 'json'):
                path = self.reports / f'{model}.{suffix}'
                write_report(results, path)
                self.manifest.add_output(path)

    def report(self) -> None:
        rows = []
        for model in MODELS:
            results = read_report(self.reports / f'{model}.json')
            guidance = (self.config.condition_guidance
                        if model == 'collaborative' else 'n/a')
            label = f'{self.config.name}:{model}'
            rows.append(summarize(label, guidance,
                                  [r for _, r in results]))
        write_summary(rows, self.reports / 'summary.csv',
                      self.reports / 'summary.json')
        self.manifest.add_output(self.reports / 'summary.csv')
        self.manifest.add_output(self.reports / 'summary.json')
        for row in rows:
            _log.info('%s: SSIM %.4f CCON %.4f TCON %.4f ECON %.4f',
                      row.model, row.ssim, row.ccon, row.tcon, row.econ)

    # -- driver -----------------------------------------------------------

    def run(self, resume: bool = False,
            stop_after: 'str|None' = None) -> RunManifest:
        """Runs every stage not already completed.

        Args:
            resume: Skip stages completed by an earlier run.
            stop_after: Stop after this stage.

        Raises:
            `StageError` naming the failed stage; artifacts of completed
                stages are kept.
            `ConfigError` when resuming with a different config.

        """
        if stop_after is not None and stop_after not in PIPELINE_STAGES:
            raise ValueError(f'Unknown stage {stop_after}')
        if self.config.num_threads:
            torch.set_num_threads(self.config.num_threads)
        with OutputLock(self.out):
            try:
                self._prepare(resume)
                for stage in PIPELINE_STAGES:
                    if resume and self.completed(stage):
                        _log.info('Skipping completed stage %s', stage)
                    else:
                        with log_stage(stage), self.manifest.stage(stage):
                            try:
                                getattr(self, stage)()
                            except Exception as exc:
                                raise StageError(stage, exc) from exc
                        self._mark(stage)
                    if stage == stop_after:
                        _log.info('Stopping after stage %s', stage)
                        break
            finally:
                self.manifest.finish(self.out / MANIFEST_NAME)
        return self.manifest


def run_pipeline(config: Config,
                 out_dir: 'str|Path',
                 resume: bool = False,
                 stop_after: 'str|None' = None) -> RunManifest:
    """Runs the pipeline stages into `out_dir`."""
    return Pipeline(config, out_dir).run(resume, stop_after)
