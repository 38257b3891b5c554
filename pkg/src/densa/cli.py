"""
Command-line interface.

    densa train     [--config FILE] [options]               trains the heads, writes heads.ckpt and train_loss.csv
    densa annotate  [--config FILE] [options] [IMAGE ...]   writes annotations.json and overlays/*.png
    densa eval      [--config FILE] [--detections FILE]     writes metrics.yaml
    densa bench     [--config FILE] [options]               writes bench_samplers.csv, bench_timing.csv and a plot
    densa scenes    [--config FILE] [options]               writes the synthetic scenes to scenes.nc

Synthetic scenes of the configured family are used wherever no dataset file is configured.

"""

import os
import sys
import logging
import argparse
import warnings
from multiprocessing import Pool
from typing import List, Tuple

import numpy as np

from densa import __version__
from densa.bench import bench_samplers, plot_bench, write_csv
from densa.config import Config, load_config, parse_overrides, with_overrides, write_config
from densa.evaluation import EvalImage, evaluate, write_metrics
from densa.heads import Heads
from densa.inference import annotate
from densa.io import load_coco, load_odgt, read_fingerprint, save_coco
from densa.scenes import SceneArchive, generate_scene, render
from densa.training import Checkpoint, LabeledImage, train

logger = logging.getLogger(__name__)

PROC_OBJS = {}
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def scenes_init(scene_params):
    PROC_OBJS['scene_params'] = scene_params


def _generate_scene_worker(seed):
    return generate_scene(seed=seed, **PROC_OBJS['scene_params'])


def generate_scenes(cfg: Config, seeds) -> list:
    """ (scene, ground truth) pairs of the given seeds, in seed order. """
    if cfg.workers > 1 and len(seeds) > 1:
        with Pool(min(cfg.workers, len(seeds)), initializer=scenes_init, initargs=(cfg.scene_params(),)) as p:
            return p.map(_generate_scene_worker, seeds)
    return [generate_scene(seed=seed, **cfg.scene_params()) for seed in seeds]


def scene_id(seed) -> str:
    return f"scene_{seed:06d}"


def _out_path(cfg: Config, *names) -> str:
    filepath = os.path.join(cfg.out_dir, *names)
    os.makedirs(os.path.dirname(filepath), exist_ok=True)
    return filepath


def _load_heads(cfg: Config, backend) -> Heads:
    """ Heads of the configured checkpoint, or untrained heads if neither heatmap nor joint score is used. """
    if cfg.checkpoint is None:
        if cfg.use_fg_location or cfg.use_pwdnet:
            err_msg = "A checkpoint is needed unless 'use_fg_location' and 'use_pwdnet' are both disabled."
            raise ValueError(err_msg)
        return Heads.init(backend.caps, cfg.seed)
    checkpoint = Checkpoint.load(cfg.checkpoint)
    if checkpoint.caps != backend.caps:
        err_msg = f"Checkpoint '{cfg.checkpoint}' was trained for {checkpoint.caps}, the backend has {backend.caps}."
        raise ValueError(err_msg)
    if checkpoint.fingerprint:
        logger.info(f"Using checkpoint '{cfg.checkpoint}' of configuration {checkpoint.fingerprint[:12]}.")
    return checkpoint.heads


def _gdalport():
    """ GDAL-backed image I/O, only imported when image files are read or overlays written. """
    from densa.io import gdalport
    return gdalport


def _training_set(cfg: Config) -> List[LabeledImage]:
    if cfg.train_data is not None:
        records = load_odgt(cfg.train_data, image_dir=cfg.image_dir)[:cfg.n_train_scenes]
        return [LabeledImage(_gdalport().read_image(record.source), record.boxes) for record in records]
    return [LabeledImage(render(scene), gt.visible_boxes) for scene, gt in generate_scenes(cfg, cfg.train_seeds())]


def _evaluation_set(cfg: Config, image_files=None) -> List[Tuple[str, object, object, object]]:
    """ (image ID, image, ground truth boxes, visibilities) of the evaluation images. """
    if image_files:
        gdalport = _gdalport()
        return [(os.path.splitext(os.path.basename(path))[0], gdalport.read_image(path), None, None)
                for path in image_files]
    if cfg.eval_data is not None:
        return [(record.image_id, _gdalport().read_image(record.source), record.boxes, None)
                for record in load_odgt(cfg.eval_data, image_dir=cfg.image_dir)]
    seeds = cfg.eval_seeds()
    return [(scene_id(seed), render(scene), gt.visible_boxes, gt.visibility)
            for seed, (scene, gt) in zip(seeds, generate_scenes(cfg, seeds))]


def cmd_train(cfg: Config, args) -> int:
    backend = cfg.create_backend()
    dataset = _training_set(cfg)
    result = train(dataset, backend, cfg.train_config())
    Checkpoint(result.heads, cfg.fingerprint(), cfg.train_config().to_dict()).save(
        _out_path(cfg, 'heads.ckpt'), overwrite=True)
    write_csv(result.log, _out_path(cfg, 'train_loss.csv'), cfg.fingerprint(), float_format='%.10g')
    logger.info(f"Trained on {len(dataset)} image(s) for {len(result.log)} iteration(s).")
    return 0


def _annotate_all(cfg: Config, images):
    backend = cfg.create_backend()
    heads = _load_heads(cfg, backend)
    results = {}
    for i, (image_id, image, _, _) in enumerate(images):
        results[image_id] = annotate(image, heads, backend, cfg.pipeline_config(seed=cfg.seed + i))
    return results


def cmd_annotate(cfg: Config, args) -> int:
    images = _evaluation_set(cfg, args.images)
    results = _annotate_all(cfg, images)
    save_coco(results, _out_path(cfg, 'annotations.json'), fingerprint=cfg.fingerprint(), overwrite=True)
    if not args.no_overlays:
        gdalport = _gdalport()
        for image_id, image, _, _ in images:
            gdalport.write_png(_out_path(cfg, 'overlays', f"{image_id}.png"),
                               gdalport.render_overlay(image, results[image_id].detections), overwrite=True)
    return 0


def cmd_eval(cfg: Config, args) -> int:
    images = _evaluation_set(cfg)
    if args.detections is not None:
        written_by = read_fingerprint(args.detections)
        if written_by is not None and written_by != cfg.fingerprint():
            wrn_msg = f"'{args.detections}' was written with configuration {written_by[:12]}, " \
                      f"evaluating with {cfg.fingerprint()[:12]}."
            warnings.warn(wrn_msg)
        records ={record.image_id: record for record in load_coco(args.detections)}
        missing = [image_id for image_id, _, _, _ in images if image_id not in records]
        if missing:
            err_msg = f"Detections of {len(missing)} image(s) are missing in '{args.detections}', e.g. '{missing[0]}'."
            raise ValueError(err_msg)
        dets = {image_id: (records[image_id].boxes, records[image_id].scores
                           if records[image_id].scores is not None else np.ones(len(records[image_id])))
                for image_id, _, _, _ in images}
    else:
        dets = {image_id: (result.boxes, result.scores) for image_id, result in _annotate_all(cfg, images).items()}

    eval_images = [EvalImage(dets[image_id][0], dets[image_id][1], gt_boxes, visibility=visibility)
                   for image_id, _, gt_boxes, visibility in images]
    metrics = evaluate(eval_images, iou_thr=cfg.eval_iou)
    write_metrics(metrics, _out_path(cfg, 'metrics.yaml'), fingerprint=cfg.fingerprint())
    logger.info(f"AP50 {metrics['ap50']:.4f}, MR-2 {metrics['mr2']:.4f}, recall {metrics['recall']:.4f}.")
    return 0


def cmd_bench(cfg: Config, args) -> int:
    backend = cfg.create_backend()
    heads = Checkpoint.load(cfg.checkpoint).heads if cfg.checkpoint is not None else None
    result = bench_samplers(cfg, heads=heads, backend=backend)
    write_csv(result.table, _out_path(cfg, 'bench_samplers.csv'), cfg.fingerprint())
    write_csv(result.per_scene, _out_path(cfg, 'bench_per_scene.csv'), cfg.fingerprint())
    write_csv(result.timing, _out_path(cfg, 'bench_timing.csv'), cfg.fingerprint())
    if not args.no_plot:
        plot_bench(result.table, cfg.out_dir)
    return 0


def cmd_scenes(cfg: Config, args) -> int:
    seeds = cfg.train_seeds() + cfg.eval_seeds()
    scenes = [scene for scene, _ in generate_scenes(cfg, seeds)]
    with SceneArchive(_out_path(cfg, 'scenes.nc'), mode='w', overwrite=True) as archive:
        archive.write(scenes, metadata={'fingerprint': cfg.fingerprint()})
    logger.info(f"Wrote {len(scenes)} scene(s).")
    return 0


COMMANDS = {'train': cmd_train, 'annotate': cmd_annotate, 'eval': cmd_eval, 'bench': cmd_bench,
            'scenes': cmd_scenes}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="YAML configuration file")
    common.add_argument('--seed', type=int, help="root seed")
    common.add_argument('--workers', type=int, help="number of worker processes")
    common.add_argument('--backend', choices=('oracle', 'sam'), help="backbone implementation")
    common.add_argument('--out-dir', dest='out_dir', help="output directory")
    common.add_argument('--set', dest='assignments', action='append', default=[], metavar='KEY=VALUE',
                        help="overrides a configuration setting, can be repeated")
    common.add_argument('-v', '--verbose', action='store_true', help="debug logging")

    parser = argparse.ArgumentParser(prog='densa', description="Few-shot smart annotation for crowded scenes.")
    parser.add_argument('--version', action='version', version=f"densa {__version__}")
    subparsers = parser.add_subparsers(dest='command', required=True)
    subparsers.add_parser('train', parents=[common], help="train the heads")
    p_annotate = subparsers.add_parser('annotate', parents=[common], help="annotate images")
    p_annotate.add_argument('images', nargs='*', help="image files (default: synthetic evaluation scenes)")
    p_annotate.add_argument('--no-overlays', dest='no_overlays', action='store_true', help="skip overlay images")
    p_eval = subparsers.add_parser('eval', parents=[common], help="compute detection metrics")
    p_eval.add_argument('--detections', help="COCO result file (default: annotate the evaluation images)")
    p_bench = subparsers.add_parser('bench', parents=[common], help="benchmark the prompt samplers")
    p_bench.add_argument('--no-plot', dest='no_plot', action='store_true', help="skip the plot")
    subparsers.add_parser('scenes', parents=[common], help="write synthetic scenes to an archive")
    return parser


def main(argv=None) -> int:
    """
    Runs a densa command.

    Parameters
    ----------
    argv : list of str, optional
        Command-line arguments without the program name. Defaults to `sys.argv[1:]`.

    Returns
    -------
    int :
        Exit status, 0 on success and 1 on any failure.

    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        flags = {'seed': args.seed, 'workers': args.workers, 'backend': args.backend, 'out_dir': args.out_dir}
        cfg = with_overrides(load_config(args.config, parse_overrides(args.assignments)),
                             **{key: value for key, value in flags.items() if value is not None})
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_config(cfg, os.path.join(cfg.out_dir, 'config.yaml'))
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        logger.debug("Command failed.", exc_info=True)
        print(f"densa: error: {' '.join(str(exc).split()) or type(exc).__name__}", file=sys.stderr)
        return 1


def run():
    """ Entry point of the console script. """
    sys.exit(main())


if __name__ == "__main__":
    run()
