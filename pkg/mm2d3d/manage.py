#!/usr/bin/env python
"""
mm2d3d command line: generate datasets, train and adapt models, label the
target set, evaluate checkpoints and measure receptive fields.

Every command fills a CommandResponse. Failures are printed to stderr
prefixed "mm2d3d:" and mapped to the exit codes 1 (usage or config),
2 (data or format) and 3 (numeric).
"""

# python
import json
import logging
import os
import shutil
import sys
import time
from functools import wraps
from typing import Optional

import click
from humanfriendly import format_size, format_timespan

# mm2d3d
from settings import base as settings

# pymm2d3d
from pymm2d3d.errors import EXIT_DATA, EXIT_USAGE, ConfigError, FormatError, Mm2d3dError, UsageError
from pymm2d3d.erf import complementarity, compute_erf, export_erf
from pymm2d3d.forge import SceneSpec, dataset_path, generate, load, save
from pymm2d3d.nets import load_checkpoint, save_checkpoint
from pymm2d3d.response import CommandResponse
from pymm2d3d.trainer import (
    Trainer,
    evaluate,
    generate_pseudo_labels,
    load_config,
    load_datasets,
    load_pseudo_labels,
    load_yaml,
    save_pseudo_labels,
)
from pymm2d3d.trainer.pseudo import VARIANTS


logger = logging.getLogger('mm2d3d.cli')


def _fail(message: str, code: int) -> int:
    click.echo(f'{settings.ERROR_PREFIX} {message}', err=True)
    return code


def command_response(func):
    """
    Run a command body with a fresh CommandResponse and turn it into an exit code.
    """
    @wraps(func)
    def wrapper(*args, **kwargs) -> int:
        response = CommandResponse()
        try:
            func(response, *args, **kwargs)
        except Mm2d3dError as exc:
            response.raise_library_error(exc)
        except OSError as exc:
            response.set_failed(FormatError.reason, f'{exc.filename or ""}: {exc.strerror or exc}', EXIT_DATA)
        for msg in response.msgs:
            click.echo(msg)
        for error in response.errors:
            _fail(f"{error['reason']}: {error['msg']}", response.exit_code)
        logger.debug("[CLI] %s finished with exit code %s", func.__name__, response.exit_code)
        return response.exit_code
    return wrapper


def _prepare_out(directory: str) -> None:
    os.makedirs(directory, exist_ok=True)


def _write_json(path: str, data: dict) -> None:
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


class Mm2d3dGroup(click.Group):
    """
    Maps click's own usage errors to exit code 1 with the mm2d3d prefix.
    """

    def main(self, args=None, prog_name=None, standalone_mode=True, **extra):
        try:
            code = super().main(args, prog_name or 'mm2d3d', standalone_mode=False, **extra)
        except click.exceptions.ClickException as exc:
            code = _fail(exc.format_message(), EXIT_USAGE)
        except click.exceptions.Abort:
            code = _fail('aborted', EXIT_USAGE)
        code = code or 0
        if standalone_mode:
            sys.exit(code)
        return code


@click.group(cls=Mm2d3dGroup)
@click.option('--threads', type=click.IntRange(min=1), default=settings.THREADS, show_default=True,
              help='Worker threads; 1 is fully deterministic.')
@click.option('--log-level', default=settings.LOG_LEVEL, show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
@click.pass_context
def cli(ctx, threads: int, log_level: str) -> None:
    settings.setup_logging(log_level)
    ctx.obj = {'threads': threads}


@cli.command(name='generate')
@click.option('--spec', 'spec_file', required=True, type=click.Path(dir_okay=False),
              help='YAML scene spec, optionally naming a preset.')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.option('--count', required=True, type=click.IntRange(min=1))
@click.pass_context
@command_response
def generate_command(response: CommandResponse, ctx, spec_file: str, out: str, count: int) -> None:
    spec = SceneSpec.from_dict(load_yaml(spec_file))
    dataset = generate(spec, count, workers=ctx.obj['threads'], progress=settings.show_progress())
    _prepare_out(out)
    path = dataset_path(out)
    save(dataset, path)
    shutil.copyfile(spec_file, os.path.join(out, settings.SPEC_NAME))
    response.set_data({'path': path, 'samples': len(dataset), 'points': dataset.num_points})
    response.set_success(f'Generated {len(dataset)} samples ({dataset.num_points} points, '
                         f'{format_size(os.path.getsize(path))}) into {path}')


def _train(response: CommandResponse, ctx, config_file: str, out: str, adapt: bool,
           pseudo_file: Optional[str] = None) -> None:
    config = load_config(config_file)
    if adapt and not config.adapts:
        raise ConfigError(f'<{config_file}> has no [uda] section, use `train` for source-only training')
    if not adapt and config.adapts:
        raise ConfigError(f'<{config_file}> has a [uda] section, use `adapt`')
    pseudo = None
    if pseudo_file:
        config = config.with_pseudo_labels(pseudo_file)
    if adapt and config.uda.pseudo_labels:
        pseudo = load_pseudo_labels(config.uda.pseudo_labels)

    source, target, eval_set = load_datasets(config)
    _prepare_out(out)
    metrics = os.path.join(out, settings.METRICS_NAME)
    if os.path.exists(metrics):
        os.remove(metrics)
    trainer = Trainer(config, source, target, pseudo_labels=pseudo,
                      threads=ctx.obj['threads'], progress=settings.show_progress())
    started = time.monotonic()
    result = trainer.fit(metrics, eval_set=eval_set)
    elapsed = format_timespan(time.monotonic() - started)

    checkpoint = os.path.join(out, settings.CHECKPOINT_NAME)
    save_checkpoint(result.model, checkpoint)
    shutil.copyfile(config_file, os.path.join(out, settings.CONFIG_NAME))
    data = {'checkpoint': checkpoint, 'metrics': metrics, 'steps': trainer.total_steps,
            'final_loss': result.losses[-1]}
    if result.report is not None:
        report = os.path.join(out, settings.REPORT_NAME)
        _write_json(report, result.report.to_dict())
        data['report'] = report
        response.add_msg(result.report.table())
    response.set_data(data)
    response.set_success(f'Trained {trainer.total_steps} steps in {elapsed}, checkpoint {checkpoint}')


@cli.command(name='train')
@click.option('--config', 'config_file', required=True, type=click.Path(dir_okay=False))
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.pass_context
@command_response
def train_command(response: CommandResponse, ctx, config_file: str, out: str) -> None:
    """
    Source-only training; the target domain is never read.
    """
    _train(response, ctx, config_file, out, adapt=False)


@cli.command(name='adapt')
@click.option('--config', 'config_file', required=True, type=click.Path(dir_okay=False))
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.option('--pseudo', 'pseudo_file', default=None, type=click.Path(dir_okay=False),
              help='Pseudo-label file from `pseudolabel`, enables the target segmentation term.')
@click.pass_context
@command_response
def adapt_command(response: CommandResponse, ctx, config_file: str, out: str, pseudo_file: Optional[str]) -> None:
    _train(response, ctx, config_file, out, adapt=True, pseudo_file=pseudo_file)


@cli.command(name='pseudolabel')
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--target', required=True, type=click.Path(file_okay=False))
@click.option('--keep', default=0.66, show_default=True, type=click.FloatRange(0.0, 1.0, min_open=True))
@click.option('--variant', default='branch', show_default=True, type=click.Choice(VARIANTS))
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@command_response
def pseudolabel_command(response: CommandResponse, checkpoint: str, target: str, keep: float,
                        variant: str, out: str) -> None:
    model = load_checkpoint(checkpoint)
    labels = generate_pseudo_labels(model, load(dataset_path(target)), keep, variant)
    save_pseudo_labels(labels, out)
    response.set_data({'path': out, 'kept': labels.num_kept, 'variant': variant})
    response.set_success(f'Kept {labels.num_kept} pseudo labels ({variant}, keep {keep}) in {out}')


@cli.command(name='evaluate')
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--data', required=True, type=click.Path(file_okay=False))
@click.option('--report', required=True, type=click.Path(dir_okay=False))
@command_response
def evaluate_command(response: CommandResponse, checkpoint: str, data: str, report: str) -> None:
    model = load_checkpoint(checkpoint)
    result = evaluate(model, load(dataset_path(data)))
    _prepare_out(os.path.dirname(os.path.abspath(report)))
    _write_json(report, result.to_dict())
    response.set_data(result.to_dict())
    response.add_msg(result.table())
    response.set_success(f'Report written to {report}')


@cli.command(name='erf')
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--data', required=True, type=click.Path(file_okay=False))
@click.option('--sample', 'sample_index', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--point', 'point_index', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--anchors', default=0, show_default=True, type=click.IntRange(min=0),
              help='Also compare both branches over this many random foreground anchors.')
@click.option('--upscale', default=4, show_default=True, type=click.IntRange(min=1))
@click.option('--out', required=True, type=click.Path(file_okay=False))
@command_response
def erf_command(response: CommandResponse, checkpoint: str, data: str, sample_index: int, point_index: int,
                anchors: int, upscale: int, out: str) -> None:
    model = load_checkpoint(checkpoint)
    dataset = load(dataset_path(data))
    if sample_index >= len(dataset):
        raise UsageError(f'Sample {sample_index} does not exist, <{data}> holds {len(dataset)} samples')
    result = compute_erf(model, dataset[sample_index], point_index)
    paths = export_erf(result, out, upscale)
    info = {'files': list(paths), 'locality_2d': result.curve('2d'), 'locality_3d': result.curve('3d')}
    if anchors:
        report = complementarity(model, dataset, anchors, progress=settings.show_progress())
        path = os.path.join(out, settings.COMPLEMENTARITY_NAME)
        _write_json(path, report.to_dict())
        info['complementarity'] = path
        response.add_msg(f'Median locality at {report.radius} m over {len(report.anchors)} anchors: '
                         f'2D {report.median_2d:.3f}, 3D {report.median_3d:.3f}')
    response.set_data(info)
    response.set_success(f'ERF of point {point_index} in sample {sample_index} written to {out}')


def main(argv=None) -> int:
    return cli.main(args=argv, prog_name='mm2d3d', standalone_mode=False)


if __name__ == '__main__':
    sys.exit(main())
