"""
PRL-Track command-line tool.

    python app.py synth     --config configs/synth.yaml --out data/
    python app.py train     --config configs/train.yaml --data data/ --out runs/full
    python app.py track     --checkpoint runs/full --data data/ --out results/
    python app.py eval      --data data/ --results results/ --out report/ [--markdown] [--pdf]
    python app.py gradcheck
    python app.py shapes    [--preset standard]
    python app.py bench     [--checkpoint runs/full | --preset desk]
    python app.py ablation  --config configs/train.yaml --data data/ --out ablation/

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from config import (ABLATION_VARIANTS, MODEL_PRESETS, SynthDatasetConfig, TrackerConfig, TrainConfig, load_config,
                    model_preset)
from services.benchmark import run_bench, shape_table
from services.dataset_io import list_sequences
from services.errors import PRLTrackError
from services.evaluation import evaluate_benchmark
from services.gradient_suite import run_suite
from services.model import PRLTrackModel, load_checkpoint
from services.report_generator import generate_ablation_markdown, write_report
from services.synth import generate_dataset
from services.tracker import track_dataset
from services.training import Trainer

logger = logging.getLogger('prltrack')

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def tracker_config(path):
    return load_config(path, TrackerConfig) if path else TrackerConfig()


def cmd_synth(args):
    config = load_config(args.config, SynthDatasetConfig)
    sequences = generate_dataset(config, args.out)
    print(f'Wrote {len(sequences)} sequences to {args.out}')
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config, TrainConfig)
    if args.variant:
        config.variant = args.variant
    trainer = Trainer(config)
    losses = trainer.fit(list_sequences(args.data), args.out)
    print(f'Trained {len(losses)} steps, final loss {losses[-1]:.4f}; checkpoint in {args.out}')
    return EXIT_OK


def cmd_track(args):
    model, _ = load_checkpoint(args.checkpoint)
    written = track_dataset(list_sequences(args.data), model, args.out, tracker_config(args.tracker_config))
    print(f'Wrote {len(written)} results files to {args.out}')
    return EXIT_OK


def cmd_eval(args):
    report = evaluate_benchmark(list_sequences(args.data), args.results)
    write_report(report, args.out, markdown=args.markdown, pdf=args.pdf)
    if report.aggregate is None:
        print('No sequence had a results file', file=sys.stderr)
        return EXIT_INVALID
    print(f'precision@20={report.aggregate.precision_at_20:.3f} auc={report.aggregate.auc:.3f} '
          f'({report.evaluated} sequences)')
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed)
    for result in results:
        print(f"{'ok  ' if result.passed else 'FAIL'} {result.name:<24} {result.error:.2e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f'{len(failed)} gradient checks failed: {", ".join(failed)}', file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_shapes(args):
    for row in shape_table(model_preset(args.preset)):
        print(row)
    return EXIT_OK


def cmd_bench(args):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = PRLTrackModel(model_preset(args.preset, args.variant))
    result = run_bench(model, iterations=args.iterations)
    entries = result['attention_entries']
    print(json.dumps(result, indent=2))
    print(f"attention score entries at T={result['token_count']}: tiered {entries['tiered']} "
          f"vs all-pairs {entries['all_pairs']}")
    return EXIT_OK


def cmd_ablation(args):
    base = load_config(args.config, TrainConfig)
    sequences = list_sequences(args.data)
    out = Path(args.out)
    rows = []
    for variant in args.variants:
        config = copy.deepcopy(base)
        config.variant = variant
        trainer = Trainer(config)
        trainer.fit(sequences, out / variant / 'checkpoint')
        track_dataset(sequences, trainer.model, out / variant / 'results', tracker_config(args.tracker_config))
        report = evaluate_benchmark(sequences, out / variant / 'results')
        write_report(report, out / variant / 'report')
        rows.append({'variant': variant, 'precision_at_20': report.aggregate.precision_at_20,
                     'auc': report.aggregate.auc})
        logger.info(f"{variant}: precision@20={rows[-1]['precision_at_20']:.3f} auc={rows[-1]['auc']:.3f}")
    (out / 'ablation.json').write_text(json.dumps(rows, indent=2), encoding='utf-8')
    (out / 'ablation.md').write_text(generate_ablation_markdown(rows), encoding='utf-8')
    print(generate_ablation_markdown(rows))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='prltrack', description='PRL-Track training, tracking and evaluation')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='generate synthetic sequences')
    synth.add_argument('--config', required=True, help='synthetic dataset YAML')
    synth.add_argument('--out', required=True, help='dataset root to write')
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser('train', help='train a model and write a checkpoint')
    train.add_argument('--config', required=True, help='training YAML')
    train.add_argument('--data', required=True, help='dataset root')
    train.add_argument('--out', required=True, help='checkpoint directory')
    train.add_argument('--variant', choices=sorted(ABLATION_VARIANTS), help='override the config variant')
    train.set_defaults(handler=cmd_train)

    track = commands.add_parser('track', help='track sequences with a checkpoint')
    track.add_argument('--checkpoint', required=True)
    track.add_argument('--data', required=True, help='dataset root or a single sequence directory')
    track.add_argument('--out', required=True, help='results directory')
    track.add_argument('--tracker-config', help='tracker YAML (window influence, smoothing)')
    track.set_defaults(handler=cmd_track)

    evaluate = commands.add_parser('eval', help='one-pass evaluation of results files')
    evaluate.add_argument('--data', required=True)
    evaluate.add_argument('--results', required=True)
    evaluate.add_argument('--out', required=True, help='report directory')
    evaluate.add_argument('--markdown', action='store_true', help='also write report.md')
    evaluate.add_argument('--pdf', action='store_true', help='also write report.pdf')
    evaluate.set_defaults(handler=cmd_eval)

    gradcheck = commands.add_parser('gradcheck', help='run the gradient suite')
    gradcheck.add_argument('--seed', type=int, default=0)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    shapes = commands.add_parser('shapes', help='print the template/search shape trace')
    shapes.add_argument('--preset', choices=sorted(MODEL_PRESETS), default='standard')
    shapes.set_defaults(handler=cmd_shapes)

    bench = commands.add_parser('bench', help='latency profile and attention cost')
    bench.add_argument('--checkpoint')
    bench.add_argument('--preset', choices=sorted(MODEL_PRESETS), default='standard')
    bench.add_argument('--variant', choices=sorted(ABLATION_VARIANTS), default='full')
    bench.add_argument('--iterations', type=int, default=3)
    bench.set_defaults(handler=cmd_bench)

    ablation = commands.add_parser('ablation', help='train, track and evaluate several variants')
    ablation.add_argument('--config', required=True)
    ablation.add_argument('--data', required=True)
    ablation.add_argument('--out', required=True)
    ablation.add_argument('--variants', nargs='+', choices=sorted(ABLATION_VARIANTS),
                          default=['baseline', 'baseline_flp', 'baseline_ar_flp', 'full'])
    ablation.add_argument('--tracker-config')
    ablation.set_defaults(handler=cmd_ablation)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args)
    except (PRLTrackError, ValueError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_INVALID
    except OSError as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
