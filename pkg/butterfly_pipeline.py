#!/usr/bin/env python3
"""
Butterfly Detection Pipeline
============================

Command-line entry point. Every stage reads and writes files, so each
subcommand can run on its own:

    validate        check a manifest against the record invariants
    stats           species histogram and long-tail summary
    split           singleton removal (optional) and the stratified 5-5 split
    build-trainset  ecological train half + pattern photos (Data_1 / Data_2)
    augment         tenfold amplification
    train           train the detector
    predict         run a checkpoint over a manifest
    eval            per-class AP, mAP and operating-point precision/recall
    pr-curve        per-class PR curve CSVs
    synth           generate a coloured-blob dataset
    run-all         split -> build-trainset -> augment -> train -> predict -> eval

Any configuration value can be overridden with ``--<section>.<key> value``,
e.g. ``--train.total_iters 2000``.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from augmentation_engine import amplify
from config_manager import ConfigManager
from dataset_manager import (DatasetManifest, TrainingStrategy, build_training_set, dataset_summary,
                             load_manifest, remove_singletons, species_histogram, split_stratified,
                             write_histogram_csv, write_manifest)
from detection_evaluator import (evaluate, read_predictions, write_pr_curves, write_report_csv)
from detector_trainer import Checkpoint, predict, train, write_predictions
from pipeline_errors import ConfigError, PipelineError
from synthetic_data import generate_blob_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'


def setup_logging(log_file: Path, level: int = logging.INFO) -> None:
    log_file.parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


class ButterflyPipeline:
    """Runs pipeline stages against one configuration."""

    def __init__(self, config: ConfigManager):
        self.config = config
        self.seed = config.get_seed()
        self.threads = config.get_threads()
        self.output_dir = Path(config.get_path('output_dir') or 'runs')

    def require_path(self, value: Optional[str], name: str) -> str:
        if not value:
            raise ConfigError(f"no {name} given (flag or paths.{name} in the config)")
        return value

    def _image_root(self, manifest_path: str, explicit: Optional[str] = None) -> Path:
        """Explicit flag, then paths.image_root, then the manifest's own directory."""
        root = explicit or self.config.get_path('image_root')
        return Path(root) if root else Path(manifest_path).parent

    def _emit(self, *paths: Path) -> List[Path]:
        for path in paths:
            print(path)
        return list(paths)

    # -- dataset stages ------------------------------------------------------

    def validate(self, manifest_path: str) -> DatasetManifest:
        manifest = load_manifest(manifest_path)
        logger.info(f"✅ {manifest_path}: {len(manifest):,} valid records")
        return manifest

    def stats(self, manifest_path: str, out: Optional[str] = None) -> List[Path]:
        manifest = load_manifest(manifest_path)
        summary = dataset_summary(manifest)
        csv_path = Path(out) if out else self.output_dir / 'species_histogram.csv'
        write_histogram_csv(species_histogram(manifest), csv_path)
        summary_path = csv_path.with_name(csv_path.stem + '_summary.json')
        with open(summary_path, 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        logger.info(f"📊 {summary['images']:,} images, {summary['species']} species "
                    f"({summary['singleton_species']} singletons); per-species count "
                    f"min {summary['min_count']} / median {summary['median_count']} / max {summary['max_count']}")
        return self._emit(csv_path, summary_path)

    def split(self, manifest_path: str, out_dir: Optional[str] = None,
              drop_singletons: bool = False) -> List[Path]:
        manifest = load_manifest(manifest_path)
        if drop_singletons:
            manifest = remove_singletons(manifest)
        train_set, test_set = split_stratified(manifest, self.seed)
        out = Path(out_dir) if out_dir else self.output_dir
        return self._emit(write_manifest(train_set, out / 'train.jsonl'),
                          write_manifest(test_set, out / 'test.jsonl'))

    def build_trainset(self, train_path: str, patterns_path: Optional[str], strategy: str,
                       out: Optional[str] = None) -> List[Path]:
        eco_train = load_manifest(train_path)
        patterns = load_manifest(patterns_path) if patterns_path else DatasetManifest(())
        result = build_training_set(eco_train, patterns, strategy)
        out_path = Path(out) if out else self.output_dir / f"{result.label.lower()}.jsonl"
        return self._emit(write_manifest(result, out_path))

    def augment(self, manifest_path: str, out_dir: Optional[str] = None,
                image_root: Optional[str] = None) -> List[Path]:
        manifest = load_manifest(manifest_path)
        out = Path(out_dir) if out_dir else self.output_dir / 'augmented'
        amplified = amplify(manifest, out, self.seed, self._image_root(manifest_path, image_root), self.threads)
        return self._emit(write_manifest(amplified, out / 'augmented.jsonl'))

    # -- model stages ----------------------------------------------------------

    def train(self, manifest_path: str, image_root: Optional[str] = None,
              checkpoint: Optional[str] = None) -> List[Path]:
        manifest = load_manifest(manifest_path)
        checkpoint_path = Path(checkpoint or self.config.get_path('checkpoint')
                               or self.output_dir / 'checkpoint.json')
        loss_path = checkpoint_path.with_name('loss_log.csv')
        train(manifest, self.config.get_train_config(), self._image_root(manifest_path, image_root),
              architecture=self.config.get_architecture(), geometry=self.config.get_geometry_config(),
              loss_config=self.config.get_loss_config(), checkpoint_path=checkpoint_path,
              loss_log_path=loss_path)
        return self._emit(checkpoint_path, loss_path)

    def predict(self, checkpoint: str, manifest_path: str, image_root: Optional[str] = None,
                out: Optional[str] = None) -> List[Path]:
        settings = self.config.get_predict_config()
        model = Checkpoint.load(checkpoint)
        manifest = load_manifest(manifest_path)
        result = predict(model, manifest, settings['score_threshold'], settings['nms_threshold'],
                         self._image_root(manifest_path, image_root))
        out_path = Path(out or self.config.get_path('predictions') or self.output_dir / 'predictions.jsonl')
        return self._emit(write_predictions(result, out_path))

    # -- evaluation stages -----------------------------------------------------

    def evaluate(self, predictions_path: str, gt_path: str, out: Optional[str] = None) -> Tuple[float, List[Path]]:
        report = evaluate(read_predictions(predictions_path), load_manifest(gt_path),
                          self.config.get_evaluation_config())
        out_path = Path(out) if out else self.output_dir / 'evaluation.csv'
        write_report_csv(report, out_path)
        print(f"mAP ({report.method}): {report.map:.6f}")
        return report.map, self._emit(out_path)

    def pr_curves(self, predictions_path: str, gt_path: str, out_dir: Optional[str] = None) -> List[Path]:
        report = evaluate(read_predictions(predictions_path), load_manifest(gt_path),
                          self.config.get_evaluation_config())
        out = Path(out_dir) if out_dir else self.output_dir / 'pr_curves'
        return self._emit(*write_pr_curves(report, out))

    def synth(self, out_dir: Optional[str], n_train: int, n_test: int, species: int, size: int) -> List[Path]:
        out = Path(out_dir) if out_dir else self.output_dir / 'synthetic'
        generate_blob_dataset(out, n_train, n_test, self.seed, species, size)
        return self._emit(out / 'train.jsonl', out / 'test.jsonl')

    # -- complete run ------------------------------------------------------------

    def run_complete_pipeline(self, manifest_path: str, patterns_path: Optional[str] = None,
                              strategy: str = TrainingStrategy.MATCHED_PATTERNS.value,
                              image_root: Optional[str] = None, drop_singletons: bool = True) -> float:
        """Run every stage in order, each stage feeding the next through files."""
        logger.info("🚀 Starting complete butterfly detection run")
        logger.info("=" * 80)
        start_time = time.time()

        # Split and trainset manifests keep paths relative to root; augmentation rewrites them.
        root = self._image_root(manifest_path, image_root)
        out = self.output_dir

        logger.info("🔄 STAGE 1: Split")
        train_path, test_path = self.split(manifest_path, str(out / 'split'), drop_singletons)

        logger.info("🔄 STAGE 2: Build training set")
        trainset_path, = self.build_trainset(str(train_path), patterns_path, strategy,
                                             str(out / 'trainset.jsonl'))

        logger.info("🔄 STAGE 3: Augment")
        augmented_path, = self.augment(str(trainset_path), str(out / 'augmented'), str(root))

        logger.info("🔄 STAGE 4: Train")
        checkpoint_path, _ = self.train(str(augmented_path), str(augmented_path.parent),
                                        str(out / 'checkpoint.json'))

        logger.info("🔄 STAGE 5: Predict")
        predictions_path, = self.predict(str(checkpoint_path), str(test_path), str(root),
                                         str(out / 'predictions.jsonl'))

        logger.info("🔄 STAGE 6: Evaluate")
        mean_ap, _ = self.evaluate(str(predictions_path), str(test_path), str(out / 'evaluation.csv'))

        logger.info("=" * 80)
        logger.info(f"🎉 COMPLETE RUN FINISHED: mAP {mean_ap:.4f}")
        logger.info(f"⏱️  Total time: {time.time() - start_time:.2f} seconds")
        logger.info("=" * 80)
        return mean_ap


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML or JSON configuration file')
    common.add_argument('--seed', type=int, help='Global seed (overrides the config)')
    common.add_argument('--threads', type=int, help='Worker threads for augmentation')
    common.add_argument('--output-dir', help='Default directory for outputs')
    common.add_argument('--log-file', help='Log file (default <output-dir>/pipeline.log)')
    common.add_argument('--verbose', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(description='Butterfly Detection Pipeline')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('validate', parents=[common], help='Validate a manifest')
    p.add_argument('--manifest')

    p = sub.add_parser('stats', parents=[common], help='Species histogram and long-tail summary')
    p.add_argument('--manifest')
    p.add_argument('--out', help='Histogram CSV path')

    p = sub.add_parser('split', parents=[common], help='Stratified 5-5 split')
    p.add_argument('--manifest')
    p.add_argument('--out-dir')
    p.add_argument('--drop-singletons', action='store_true', help='Remove single-image species first')

    p = sub.add_parser('build-trainset', parents=[common], help='Join ecological train half with patterns')
    p.add_argument('--train')
    p.add_argument('--patterns')
    p.add_argument('--strategy', choices=[s.value for s in TrainingStrategy],
                   default=TrainingStrategy.ALL_PATTERNS.value)
    p.add_argument('--out')

    p = sub.add_parser('augment', parents=[common], help='Tenfold amplification')
    p.add_argument('--manifest')
    p.add_argument('--out', help='Output directory')
    p.add_argument('--image-root')

    p = sub.add_parser('train', parents=[common], help='Train the detector')
    p.add_argument('--manifest')
    p.add_argument('--image-root')
    p.add_argument('--checkpoint', help='Checkpoint output path')

    p = sub.add_parser('predict', parents=[common], help='Run a checkpoint over a manifest')
    p.add_argument('--checkpoint')
    p.add_argument('--manifest')
    p.add_argument('--image-root')
    p.add_argument('--out')

    for name, help_text in (('eval', 'Per-class AP and mAP'), ('pr-curve', 'Per-class PR curve CSVs')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--pred')
        p.add_argument('--gt')
        p.add_argument('--out')

    p = sub.add_parser('synth', parents=[common], help='Generate a coloured-blob dataset')
    p.add_argument('--out')
    p.add_argument('--n-train', type=int, default=100)
    p.add_argument('--n-test', type=int, default=50)
    p.add_argument('--species', type=int, default=3)
    p.add_argument('--size', type=int, default=128)

    p = sub.add_parser('run-all', parents=[common], help='Complete run from one ecological manifest')
    p.add_argument('--manifest')
    p.add_argument('--patterns')
    p.add_argument('--strategy', choices=[s.value for s in TrainingStrategy],
                   default=TrainingStrategy.MATCHED_PATTERNS.value)
    p.add_argument('--image-root')
    p.add_argument('--keep-singletons', action='store_true')

    return parser


def parse_overrides(parser: argparse.ArgumentParser, extra: Sequence[str]) -> Dict[str, str]:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` pairs into overrides."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith('--') or '.' not in token:
            parser.error(f"unrecognized arguments: {token}")
        key, eq, value = token[2:].partition('=')
        if not eq:
            if i + 1 >= len(extra):
                parser.error(f"missing value for {token}")
            i += 1
            value = extra[i]
        overrides[key] = value
        i += 1
    return overrides


def load_config(args: argparse.Namespace, overrides: Dict[str, str]) -> ConfigManager:
    config = ConfigManager(args.config)
    config.apply_overrides(overrides)
    if args.seed is not None:
        config.set('seed', args.seed)
    if args.threads is not None:
        config.set('threads', args.threads)
    if args.output_dir is not None:
        config.set('paths.output_dir', args.output_dir)
    if not config.validate_config():
        raise ConfigError("configuration failed validation")
    return config


def run_command(pipeline: ButterflyPipeline, args: argparse.Namespace) -> None:
    config = pipeline.config

    def path(flag: Optional[str], key: str) -> str:
        return pipeline.require_path(flag or config.get_path(key), key)

    command = args.command
    if command == 'validate':
        pipeline.validate(path(args.manifest, 'manifest'))
    elif command == 'stats':
        pipeline.stats(path(args.manifest, 'manifest'), args.out)
    elif command == 'split':
        pipeline.split(path(args.manifest, 'manifest'), args.out_dir, args.drop_singletons)
    elif command == 'build-trainset':
        pipeline.build_trainset(path(args.train, 'train_manifest'), args.patterns or config.get_path('patterns'),
                                args.strategy, args.out)
    elif command == 'augment':
        pipeline.augment(path(args.manifest, 'manifest'), args.out, args.image_root)
    elif command == 'train':
        pipeline.train(path(args.manifest, 'train_manifest'), args.image_root, args.checkpoint)
    elif command == 'predict':
        pipeline.predict(path(args.checkpoint, 'checkpoint'), path(args.manifest, 'test_manifest'),
                         args.image_root, args.out)
    elif command == 'eval':
        pipeline.evaluate(path(args.pred, 'predictions'), path(args.gt, 'test_manifest'), args.out)
    elif command == 'pr-curve':
        pipeline.pr_curves(path(args.pred, 'predictions'), path(args.gt, 'test_manifest'), args.out)
    elif command == 'synth':
        pipeline.synth(args.out, args.n_train, args.n_test, args.species, args.size)
    elif command == 'run-all':
        pipeline.run_complete_pipeline(path(args.manifest, 'manifest'), args.patterns or config.get_path('patterns'),
                                       args.strategy, args.image_root, drop_singletons=not args.keep_singletons)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = parse_overrides(parser, extra)
    except SystemExit as e:
        return int(e.code or 0)

    output_dir = Path(args.output_dir or 'runs')
    setup_logging(Path(args.log_file) if args.log_file else output_dir / 'pipeline.log',
                  logging.DEBUG if args.verbose else logging.INFO)

    try:
        config = load_config(args, overrides)
        run_command(ButterflyPipeline(config), args)
    except PipelineError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected failure: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
