# -*- coding: utf-8 -*-
"""Train, evaluate and inspect NUMSnet and the Unet-family baselines.

Example usage:
- python numsnet_cli.py params --model numsnet --classes 3 --check-table1
- python numsnet_cli.py gradcheck --ops conv2d,maxpool2d
- python numsnet_cli.py split --synth 829 --strategy RandomOrdered -o plan.txt
- python numsnet_cli.py train --model numsnet --synth 60 --extent 64 --width-divisor 4 -o numsnet.ckpt
- python numsnet_cli.py eval --ckpt numsnet.ckpt --synth 60 --extent 64 --plan plan.txt --test-order shuffled
- python numsnet_cli.py segment --ckpt numsnet.ckpt --data stacks/lung-01 --out masks/
- python numsnet_cli.py experiment exp-C -o exp-C.csv

Relative --data/--stack paths fall back to $NUMSNET_DATA_ROOT. Exit codes:
0 success, 1 a check failed, 2 bad usage or input.
"""
import argparse
import logging
import os
import sys

import numpy as np
import simplejson as json
from PIL import Image

from metrics_losses.metrics import write_csv
from model_zoo.checkpoint import (ArchitectureMismatchError, CheckpointError, load_checkpoint, read_checkpoint,
                                  save_checkpoint)
from model_zoo.zoo import (ARCHITECTURES, REFERENCE_COUNTS, REFERENCE_CLASSES, build_model, count_params,
                           scaled_widths)
from stack_data.colors import colors_for, overlay
from stack_data.preprocess import prepare_stack, threshold_prediction
from stack_data.split import SplitError, Strategy, read_plan, sample_split
from stack_data.stack import StackError, load_stack
from stack_data.synth import synth_stack
from tensor_engine.errors import EngineError
from tensor_engine.optim import Adam, AdamState
from tensor_engine.rng import Stream
from train_eval.config import (TEST_ORDERS, ConfigError, TrainConfig, load_experiment,
                               load_train_config, resolve_data_path)
from train_eval.gradcheck_suite import CASES, TOLERANCE, run_suite
from train_eval.harness import Run, evaluate, predict_sequence, train_model
from train_eval.sweep import run_experiment

log = logging.getLogger('numsnet_cli')

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Arguments that parse but make no sense together."""


def parse_widths(text):
    widths = [int(w) for w in text.split(',')]
    if len(widths) != 5:
        raise argparse.ArgumentTypeError('--widths needs 5 comma-separated values, got %r' % text)
    return widths


def add_data_arguments(parser):
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument('--data', help='Stack directory (images/, masks/, manifest).')
    group.add_argument('--synth', type=int, metavar='N', help='Use an N-slice synthetic stack.')
    parser.add_argument('--classes', type=int, default=3, help='Classes of the synthetic stack.')
    parser.add_argument('--synth-seed', type=int, default=0, help='Seed of the synthetic stack.')
    parser.add_argument('--extent', type=int, help='Resize slices to EXTENT x EXTENT.')


def load_data(args):
    """PreparedStack from --data or --synth."""
    if args.data:
        images, labels = load_stack(resolve_data_path(args.data))
    else:
        extent = args.extent or 64
        images, labels = synth_stack(args.synth, args.classes, seed=args.synth_seed, extent=(extent, extent))
    extent = (args.extent, args.extent) if args.extent else None
    return prepare_stack(images, labels, extent=extent)


def load_or_sample_plan(args, stack, seed):
    if args.plan:
        plan = read_plan(args.plan)
        plan.check(len(stack.annotated))
        return plan
    return sample_split(len(stack.annotated), stack.annotated, args.strategy, seed=seed)


def cmd_params(args):
    """Print the parameter counts of one architecture."""
    if args.check_counts and (args.widths or args.no_bn or args.classes != REFERENCE_CLASSES):
        raise UsageError('--check-table1 compares the default widths with batch-norm and 3 classes')

    model = build_model(args.model, widths=args.widths, num_classes=args.classes,
                        batch_norm=not args.no_bn, deep_supervision=args.deep_supervision)
    counts = count_params(model)
    print('model          %s' % args.model)
    print('widths         %s' % ','.join(str(w) for w in model.widths))
    print('classes        %d' % model.num_classes)
    print('total          {0:,}'.format(counts.total))
    print('trainable      {0:,}'.format(counts.trainable))
    print('non-trainable  {0:,}'.format(counts.non_trainable))

    if args.check_counts:
        expected = REFERENCE_COUNTS[args.model]
        if tuple(counts) != expected:
            print('count MISMATCH: expected {0:,} / {1:,} / {2:,}'.format(*expected))
            return EXIT_FAILED
        print('counts ok')
    return EXIT_OK


def cmd_gradcheck(args):
    """Finite-difference check of the selected ops; fails on any error at
    or above the tolerance."""
    ops = [op for op in args.ops.split(',') if op] if args.ops else None
    results = run_suite(ops, seed=args.seed, tolerance=args.tolerance)
    failed = 0
    for name, error in results.items():
        ok = error < args.tolerance
        failed += not ok
        print('%-20s %.3e  %s' % (name, error, 'ok' if ok else 'FAIL'))
    print('%d/%d passed' % (len(results) - failed, len(results)))
    return EXIT_FAILED if failed else EXIT_OK


def cmd_split(args):
    """Draw a split plan and write it to -o (or stdout)."""
    if args.stack:
        _, labels = load_stack(resolve_data_path(args.stack))
        n, annotated = len(labels), labels.annotated
    else:
        n, annotated = args.synth, None

    plan = sample_split(n, annotated, args.strategy, train_frac=args.train_frac, val_frac=args.val_frac,
                        min_annotated_frac=args.min_annotated_frac, seed=args.seed, universe=args.universe)
    if args.output:
        plan.write(args.output)
    print('train %s' % ' '.join(str(i) for i in plan.train))
    print('%d train, %d validation, %d test' % (len(plan.train), len(plan.validation), len(plan.test)))
    return EXIT_OK


def _rep_path(path, rep, reps):
    if reps == 1:
        return path
    root, ext = os.path.splitext(path)
    return '%s.rep%d%s' % (root, rep, ext)


def _epochs_done(path):
    """Epochs behind a checkpoint, from the record written next to it."""
    record_path = path + '.record.json'
    if not os.path.exists(record_path):
        return 0
    with open(record_path) as f:
        record = json.load(f)
    return record.get('extra', {}).get('epochs_done', len(record.get('losses', [])))


def _start_model(args, config, stack, widths, seed, rep):
    """(model, optimizer, first epoch index): fresh, or from --resume."""
    if not args.resume:
        model = build_model(args.model, widths=widths, num_classes=len(stack.class_names),
                            deep_supervision=config.deep_supervision, seed=seed)
        return model, Adam(model.parameters.trainable(), lr=config.lr), 0

    path = _rep_path(args.resume, rep, args.reps)
    checkpoint = read_checkpoint(path)
    if checkpoint.architecture != args.model:
        raise ArchitectureMismatchError('%s holds %s, not %s' % (path, checkpoint.architecture, args.model))
    model = checkpoint.to_model()
    state = checkpoint.optimizer or AdamState(lr=config.lr)
    if args.lr:
        state.lr = args.lr
    start = _epochs_done(path)
    log.info('resuming %s from %s at epoch %d (%d optimizer steps)', args.model, path, start + 1, state.t)
    return model, Adam(model.parameters.trainable(), state=state), start


def cmd_train(args):
    """Train --reps models and write a checkpoint, loss CSV, evaluation CSV
    and JSON record for each."""
    config = load_train_config(args.config) if args.config else TrainConfig()
    config = config.replace(epochs=args.epochs, batch_size=args.batch_size, loss=args.loss, lr=args.lr,
                            deep_supervision=args.deep_supervision or None)
    config.validate()
    stack = load_data(args)
    widths = args.widths or (scaled_widths(args.model, args.width_divisor) if args.width_divisor else None)

    for rep in range(args.reps):
        seed = args.seed + rep
        rep_config = config.replace(seed=seed)
        plan = load_or_sample_plan(args, stack, seed)
        model, optimizer, start = _start_model(args, rep_config, stack, widths, seed, rep)
        record = train_model(model, [Run(stack, plan)], rep_config, optimizer=optimizer,
                             strategy=plan.strategy.value, start_epoch=start)
        report = evaluate(model, stack, plan.test, 'ordered', threshold=rep_config.threshold)
        record.reports.append(report)

        path = _rep_path(args.output, rep, args.reps)
        save_checkpoint(model, path, optimizer)
        record.write_loss_csv(path + '.loss.csv')
        write_csv(path + '.eval.csv', [report])
        with open(path + '.record.json', 'w') as f:
            json.dump(record.to_dict(), f, indent=2, ignore_nan=True)
        print('%s: final loss %.4f, mean Dice %.2f%% -> %s' % (
            args.model, record.losses[-1], report.means['dice_smoothed'], path))
    return EXIT_OK


def cmd_eval(args):
    """Score a checkpoint on a stack's test slices in each --test-order."""
    model = load_checkpoint(args.ckpt)
    stack = load_data(args)
    plan = read_plan(args.plan) if args.plan else None
    indices = plan.test if plan else range(len(stack.annotated))

    reports = []
    for order in args.test_order or ['ordered']:
        report = evaluate(model, stack, indices, order, stream=Stream(args.seed, 'test-order/' + order),
                          threshold=args.threshold, oracle=args.oracle)
        reports.append(report)
        for row in report.rows():
            print('%-10s %-8s %-8s Pr %6.2f  Re %6.2f  IoU %6.2f  Dice %6.2f' % (
                row['test_order'], row['model'], row['class'], row['Pr'], row['Re'], row['IoU'],
                row['dice_smoothed']))
    if args.output:
        write_csv(args.output, reports)
    return EXIT_OK


def cmd_segment(args):
    """Write an overlay PNG and one 0/255 PNG per class plane for every
    slice, predicted in ascending order."""
    model = load_checkpoint(args.ckpt)
    stack = load_data(args)
    colors = colors_for(len(stack.class_names), args.grouped_colors)

    overlays = os.path.join(args.out, 'overlay')
    planes_dir = os.path.join(args.out, 'planes')
    for path in (overlays, planes_dir):
        if not os.path.isdir(path):
            os.makedirs(path)

    order = list(range(len(stack.annotated)))
    predictions = predict_sequence(model, stack, order)
    for index in order:
        planes = threshold_prediction(predictions[index], args.threshold)
        Image.fromarray(overlay(stack.images[index, 0], planes, colors)).save(
            os.path.join(overlays, '%04d.png' % index))
        for name, plane in zip(stack.class_names, planes):
            Image.fromarray((plane * 255).astype(np.uint8)).save(
                os.path.join(planes_dir, '%04d_%s.png' % (index, name)))
    print('wrote %d overlays to %s' % (len(order), args.out))
    return EXIT_OK


def cmd_experiment(args):
    """Run a preset or experiment file and print its averaged mean rows."""
    spec = load_experiment(args.experiment, repetitions=args.reps, seed=args.seed, epochs=args.epochs)
    result = run_experiment(spec, out_csv=args.output, runner=args.runner)
    for row in result.rows:
        if row['class'] == 'mean':
            print('%-24s %-8s Pr %6.2f  Re %6.2f  IoU %6.2f  Dice %6.2f  (%d reps)' % (
                row['model'], row['test_order'], row['Pr'], row['Re'], row['IoU'], row['dice_smoothed'],
                row['repetitions']))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description='NUMSnet cross-scan segmentation: training, evaluation and audits.',
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Log progress at DEBUG level.')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    params = commands.add_parser('params', help='Parameter counts of an architecture.')
    params.add_argument('--model', required=True, choices=ARCHITECTURES)
    params.add_argument('--classes', type=int, default=REFERENCE_CLASSES)
    params.add_argument('--widths', type=parse_widths, help='Five comma-separated filter counts.')
    params.add_argument('--no-bn', action='store_true', help='Build without batch-norm.')
    params.add_argument('--deep-supervision', action='store_true')
    params.add_argument('--check-table1', '--check-counts', dest='check_counts', action='store_true',
                        help='Exit 1 unless the counts match REFERENCE_COUNTS.')
    params.set_defaults(func=cmd_params)

    gradcheck = commands.add_parser('gradcheck', help='Finite-difference gradient checks.')
    gradcheck.add_argument('--ops', help='Comma-separated subset of: %s' % ', '.join(CASES))
    gradcheck.add_argument('--seed', type=int, default=0)
    gradcheck.add_argument('--tolerance', type=float, default=TOLERANCE)
    gradcheck.set_defaults(func=cmd_gradcheck)

    split = commands.add_parser('split', help='Draw a train/validation/test split.')
    source = split.add_mutually_exclusive_group(required=True)
    source.add_argument('--stack', help='Stack directory; its masks mark annotated slices.')
    source.add_argument('--synth', type=int, metavar='N', help='N slices, all annotated.')
    split.add_argument('--strategy', default='RandomOrdered', help=', '.join(s.value for s in Strategy))
    split.add_argument('--seed', type=int, default=0)
    split.add_argument('--train-frac', type=float, default=0.10)
    split.add_argument('--val-frac', type=float, default=0.01)
    split.add_argument('--min-annotated-frac', type=float, default=0.5)
    split.add_argument('--universe', default='all', choices=('all', 'annotated'))
    split.add_argument('-o', '--output', help='Write the plan here.')
    split.set_defaults(func=cmd_split)

    train = commands.add_parser('train', help='Train a model and save a checkpoint.')
    train.add_argument('--model', required=True, choices=ARCHITECTURES)
    add_data_arguments(train)
    train.add_argument('--plan', help='Split plan file; drawn with --strategy when absent.')
    train.add_argument('--strategy', default='MidSeq')
    train.add_argument('--config', help='TrainConfig YAML file.')
    train.add_argument('--widths', type=parse_widths)
    train.add_argument('--width-divisor', type=int, help='Divide the default widths by this.')
    train.add_argument('--epochs', type=int)
    train.add_argument('--batch-size', type=int)
    train.add_argument('--loss', choices=('DL', 'BCL', 'BDL'))
    train.add_argument('--lr', type=float)
    train.add_argument('--deep-supervision', action='store_true')
    train.add_argument('--reps', type=int, default=1, help='Independent repetitions (seed, seed+1, ...).')
    train.add_argument('--seed', type=int, default=0)
    train.add_argument('--resume', metavar='CKPT',
                       help='Continue from this checkpoint and its optimizer state; --epochs counts the extra epochs.')
    train.add_argument('-o', '--output', required=True, help='Checkpoint path.')
    train.set_defaults(func=cmd_train)

    evaluation = commands.add_parser('eval', help='Evaluate a checkpoint.')
    evaluation.add_argument('--ckpt', required=True)
    add_data_arguments(evaluation)
    evaluation.add_argument('--plan', help='Evaluate its test slices (default: every slice).')
    evaluation.add_argument('--test-order', action='append', choices=TEST_ORDERS)
    evaluation.add_argument('--oracle', action='store_true', help='Score the ground truth against itself.')
    evaluation.add_argument('--threshold', type=float, default=0.5)
    evaluation.add_argument('--seed', type=int, default=0)
    evaluation.add_argument('-o', '--output', help='Write the report CSV here.')
    evaluation.set_defaults(func=cmd_eval)

    segment = commands.add_parser('segment', help='Export overlays and binary plane PNGs.')
    segment.add_argument('--ckpt', required=True)
    add_data_arguments(segment)
    segment.add_argument('--out', required=True)
    segment.add_argument('--paper-colors', '--grouped-colors', dest='grouped_colors', action='store_true',
                         help='Collapse 7 classes onto red, blue and green display planes.')
    segment.add_argument('--threshold', type=float, default=0.5)
    segment.set_defaults(func=cmd_segment)

    experiment = commands.add_parser('experiment', help='Run a preset (exp-A..exp-D) or spec file.')
    experiment.add_argument('experiment')
    experiment.add_argument('--reps', type=int)
    experiment.add_argument('--seed', type=int)
    experiment.add_argument('--epochs', type=int)
    experiment.add_argument('--runner', default='inline', choices=('inline', 'local'))
    experiment.add_argument('-o', '--output', help='Write the averaged CSV here.')
    experiment.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')

    try:
        return args.func(args)
    except (UsageError, ConfigError, StackError, SplitError, CheckpointError, EngineError,
            KeyError, ValueError, IOError) as e:
        log.debug('command failed', exc_info=True)
        print('error: %s' % e, file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
