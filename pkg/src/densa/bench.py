"""
Prompt sampler benchmark on synthetic crowds.

For every scene seed and every (sampler, grid, budget) cell, the scene's point grid is sampled, decoded and scored;
the valid masks (score above the sampler threshold) are the proposals. The scenes are denser crowds of smaller
objects than the training scenes, and by default only grid points on the foreground are offered, as a prompt
generator would. A cell reports the proposal recall before
and after NMS, the false positives per image after NMS, the number of decoded prompts and the number of prompts
offered. An extra 'oracle' row prompts one interior point of every visible ground truth mask.

Wall times are kept apart from the table, so the table itself is reproducible byte by byte.

"""

import os
import time
import logging
from dataclasses import replace
from multiprocessing import Pool
from typing import List, NamedTuple

import numpy as np
import pandas as pd

from densa.evaluation.metrics import match
from densa.geometry.boxes import nms
from densa.geometry.masks import masks_to_boxes
from densa.geometry.prompts import PromptSet, grid_points
from densa.heads import NativeIouScorer, PwdScorer, adapt_features, compute_heatmap, extract_prompts
from densa.sampling.eps import eps_sample, random_sampler, score_prompts
from densa.scenes import GroundTruth, generate_scene, render

logger = logging.getLogger(__name__)

PROC_OBJS = {}
TABLE_COLUMNS = ('sampler', 'grid', 'budget', 'n_scenes', 'recall', 'recall_nms', 'avg_fp', 'decoded', 'n_prompts')
TIMING_COLUMNS = ('sampler', 'grid', 'budget', 'seed', 'seconds')
ORACLE_SAMPLER = 'oracle'
FLOAT_FORMAT = '%.6f'


def bench_init(cfg, backend, heads):
    """ Stores the objects shared by all benchmark workers. """
    PROC_OBJS['cfg'] = cfg
    PROC_OBJS['backend'] = backend
    PROC_OBJS['heads'] = heads


class BenchResult(NamedTuple):
    """ Aggregated table, per-scene rows and wall times of a benchmark run. """
    table: pd.DataFrame
    per_scene: pd.DataFrame
    timing: pd.DataFrame


def oracle_prompts(gt: GroundTruth) -> PromptSet:
    """ One prompt per visible ground truth mask: the centre of its pixel closest to the mask centroid. """
    points = []
    for mask in gt.visible_masks:
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            continue
        i = int(np.argmin((ys - ys.mean()) ** 2 + (xs - xs.mean()) ** 2))
        points.append((xs[i] + 0.5, ys[i] + 0.5))
    return PromptSet(np.array(points, dtype=np.float64).reshape(-1, 2))


def proposal_boxes(found, image_size):
    """ Image-pixel boxes and scores of scored native masks; empty masks are skipped. """
    if not found:
        return np.zeros((0, 4)), np.zeros(0)
    height, width = image_size
    masks = np.stack([m.mask for m in found])
    scores = np.array([m.score for m in found], dtype=np.float64)
    boxes = masks_to_boxes(masks) * np.array([width / masks.shape[2], height / masks.shape[1]] * 2)
    nonempty = np.flatnonzero(np.isfinite(boxes[:, 0]))
    return boxes[nonempty], scores[nonempty]


def proposal_metrics(boxes, scores, gt_boxes, iou_thr=0.5, nms_threshold=0.5) -> dict:
    """
    Recall of a set of proposals before and after NMS, and its false positives after NMS.

    Parameters
    ----------
    boxes : np.ndarray
        Proposal boxes (N, 4) in image pixels.
    scores : np.ndarray
        Proposal scores (N,).
    gt_boxes : np.ndarray
        Visible ground truth boxes (M, 4).
    iou_thr : float, optional
        Box IoU of a match (default 0.5).
    nms_threshold : float, optional
        Box IoU of NMS (default 0.5).

    Returns
    -------
    dict :
        'recall', 'recall_nms', 'fp_nms' and 'n_gt'.

    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n_gt = gt_boxes.shape[0]
    metrics = {'recall': 0., 'recall_nms': 0., 'fp_nms': 0, 'n_gt': n_gt}
    if boxes.shape[0] == 0:
        return metrics

    all_match = match(boxes, scores, gt_boxes, iou_thr)
    keep = nms(boxes, scores, nms_threshold)
    nms_match = match(boxes[keep], scores[keep], gt_boxes, iou_thr)
    if n_gt:
        metrics['recall'] = all_match.n_covered / n_gt
        metrics['recall_nms'] = nms_match.n_covered / n_gt
    metrics['fp_nms'] = int(np.count_nonzero(nms_match.fp))
    return metrics


def run_sampler(sampler, feat, prompts, scorer, backend, eps_cfg):
    """
    Runs one sampler and returns the boxes and scores of its valid masks and the number of decoded prompts.

    'full' decodes every prompt, 'random' a seeded subset of `eps_cfg.budget` prompts, 'eps' the efficient prompt
    sampler. The first two keep masks scoring above `eps_cfg.threshold`, like the sampler does. Masks are turned into
    boxes batch by batch, so dense grids do not hold all their masks at once.

    """
    if len(prompts) == 0:
        return np.zeros((0, 4)), np.zeros(0), 0
    if sampler == 'eps':
        result = eps_sample(feat, prompts, scorer, backend, eps_cfg)
        return proposal_boxes(result.masks, feat.image_size) + (result.decoded,)
    if sampler == 'random':
        prompts = random_sampler(prompts, eps_cfg.budget, eps_cfg.seed)
    elif sampler not in ('full', ORACLE_SAMPLER):
        err_msg = f"Sampler '{sampler}' not known."
        raise ValueError(err_msg)
    boxes, scores = [], []
    for start in range(0, len(prompts), eps_cfg.batch_size):
        batch = prompts.take(np.arange(start, min(start + eps_cfg.batch_size, len(prompts))))
        found = score_prompts(feat, batch, scorer, backend, eps_cfg.batch_size, threshold=eps_cfg.threshold)
        batch_boxes, batch_scores = proposal_boxes(found, feat.image_size)
        boxes.append(batch_boxes)
        scores.append(batch_scores)
    return np.concatenate(boxes), np.concatenate(scores), len(prompts)


def bench_prompts(grid, image, heat=None, heat_threshold=0.5) -> PromptSet:
    """
    Foreground points of a grid: heatmap values of at least `heat_threshold` if a heatmap is given, else label plane
    pixels of an object.

    """
    if heat is not None:
        return extract_prompts(heat, grid, heat_threshold, image.width, image.height)
    if image.labels is None:
        err_msg = "Foreground prompts need either trained heads or images carrying a label plane."
        raise ValueError(err_msg)
    prompts = grid_points(grid, image.width, image.height)
    cells = np.floor(prompts.xy).astype(np.int64)
    return prompts.take(np.flatnonzero(image.labels[cells[:, 1], cells[:, 0]] >= 0))


def bench_scene(seed, cfg, backend, heads=None):
    """
    Benchmarks all cells on the scene of one seed.

    Returns
    -------
    rows, timings : list of dict

    """
    scene, gt = generate_scene(seed=seed, **cfg.scene_params(bench=True))
    image = render(scene)
    feat = backend.encode_image(image)
    heat = None
    if heads is None:
        scorer = NativeIouScorer()
    else:
        raw = backend.extract_semantic_features(image)
        adapted, _ = adapt_features(raw, heads)
        scorer = PwdScorer(heads, adapted, cfg.token_ablation)
        heat = compute_heatmap(raw, heads)

    cells = []
    for grid in cfg.bench_grids:
        if cfg.bench_foreground:
            prompts = bench_prompts(grid, image, heat, cfg.heat_threshold)
        else:
            prompts = grid_points(grid, image.width, image.height)
        for sampler in cfg.bench_samplers:
            for budget in ([None] if sampler == 'full' else cfg.bench_budgets):
                cells.append((sampler, grid, budget, prompts))
    cells.append((ORACLE_SAMPLER, None, None, oracle_prompts(gt)))

    rows, timings = [], []
    for cell, (sampler, grid, budget, prompts) in enumerate(cells):
        eps_cfg = cfg.eps_config(seed=seed)
        if budget is not None:
            eps_cfg = replace(eps_cfg, budget=budget)
        start = time.perf_counter()
        boxes, scores, decoded = run_sampler(sampler, feat, prompts, scorer, backend, eps_cfg)
        seconds = time.perf_counter() - start
        metrics = proposal_metrics(boxes, scores, gt.visible_boxes, cfg.eval_iou, cfg.nms_threshold)
        rows.append({'cell': cell, 'sampler': sampler, 'grid': grid, 'budget': budget, 'seed': seed,
                     'recall': metrics['recall'], 'recall_nms': metrics['recall_nms'], 'fp_nms': metrics['fp_nms'],
                     'n_gt': metrics['n_gt'], 'decoded': decoded, 'n_prompts': len(prompts)})
        timings.append({'sampler': sampler, 'grid': grid, 'budget': budget, 'seed': seed, 'seconds': seconds})
    return rows, timings


def _bench_scene_worker(seed):
    return bench_scene(seed, PROC_OBJS['cfg'], PROC_OBJS['backend'], PROC_OBJS['heads'])


def aggregate(per_scene: pd.DataFrame) -> pd.DataFrame:
    """ Means over scenes per (sampler, grid, budget) cell, in order of first appearance. """
    grouped = per_scene.groupby('cell', sort=True)
    table = grouped.agg(sampler=('sampler', 'first'), grid=('grid', 'first'), budget=('budget', 'first'),
                        n_scenes=('seed', 'size'), recall=('recall', 'mean'), recall_nms=('recall_nms', 'mean'),
                        avg_fp=('fp_nms', 'mean'), decoded=('decoded', 'mean'),
                        n_prompts=('n_prompts', 'mean')).reset_index(drop=True)
    return table[list(TABLE_COLUMNS)]


def _nullable_ints(df: pd.DataFrame) -> pd.DataFrame:
    for column in ('grid', 'budget'):
        df[column] = pd.array([None if pd.isna(v) else int(v) for v in df[column]], dtype='Int64')
    return df


def bench_samplers(cfg, heads=None, backend=None, seeds=None) -> BenchResult:
    """
    Runs the sampler benchmark.

    Parameters
    ----------
    cfg : Config
        Benchmark cells (`bench_samplers`, `bench_grids`, `bench_budgets`), scene family, sampler settings and
        `workers`.
    heads : Heads, optional
        Trained heads; scoring uses the joint score if given, else the native IoU prediction.
    backend : Backend, optional
        Defaults to the backend of `cfg`.
    seeds : list of int, optional
        Scene seeds. Defaults to `bench_seeds` seeds starting at the evaluation seeds.

    Returns
    -------
    BenchResult

    """
    backend = backend or cfg.create_backend()
    if seeds is None:
        seeds = [cfg.seed + cfg.eval_seed_offset + i for i in range(cfg.bench_seeds)]
    if cfg.workers > 1 and len(seeds) > 1:
        with Pool(min(cfg.workers, len(seeds)), initializer=bench_init, initargs=(cfg, backend, heads)) as p:
            outputs = p.map(_bench_scene_worker, seeds)
    else:
        outputs = [bench_scene(seed, cfg, backend, heads) for seed in seeds]

    rows, timings = [], []
    for seed, (scene_rows, scene_timings) in zip(seeds, outputs):
        rows.extend(scene_rows)
        timings.extend(scene_timings)
        logger.info(f"Benchmarked scene {seed} ({len(scene_rows)} cells).")
    per_scene = _nullable_ints(pd.DataFrame(rows))
    timing = _nullable_ints(pd.DataFrame(timings, columns=list(TIMING_COLUMNS)))
    return BenchResult(aggregate(per_scene), per_scene, timing)


def write_csv(df: pd.DataFrame, filepath, fingerprint=None, float_format=FLOAT_FORMAT):
    """ Writes a table as CSV, preceded by a '# fingerprint: <hash>' line if a fingerprint is given. """
    with open(filepath, 'w', newline='') as f:
        if fingerprint is not None:
            f.write(f"# fingerprint: {fingerprint}\n")
        df.to_csv(f, index=False, float_format=float_format)


def read_csv(filepath) -> pd.DataFrame:
    return pd.read_csv(filepath, comment='#')


def plot_bench(table: pd.DataFrame, out_dir) -> List[str]:
    """
    Plots recall and decoded prompts over the grid size, one line per sampler and budget.

    Returns
    -------
    list of str :
        Written image files.

    """
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    series = table[table['sampler'] != ORACLE_SAMPLER]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    labels = [sampler if pd.isna(budget) else f"{sampler} (K={int(budget)})"
              for sampler, budget in zip(series['sampler'], series['budget'])]
    for label in dict.fromkeys(labels):
        group = series[[current == label for current in labels]]
        grids = group['grid'].astype(float)
        axes[0].plot(grids, group['recall'], marker='o', label=label)
        axes[1].plot(grids, group['decoded'], marker='o', label=label)
    oracle = table[table['sampler'] == ORACLE_SAMPLER]
    if len(oracle):
        axes[0].axhline(float(oracle['recall'].iloc[0]), color='k', linestyle='--', label=ORACLE_SAMPLER)
    for ax, ylabel in zip(axes, ('proposal recall', 'decoded prompts')):
        ax.set_xscale('log', base=2)
        ax.set_xlabel('grid size')
        ax.set_ylabel(ylabel)
        ax.legend()
    fig.tight_layout()
    filepath = os.path.join(out_dir, 'bench_samplers.png')
    fig.savefig(filepath, dpi=100)
    plt.close(fig)
    return [filepath]
