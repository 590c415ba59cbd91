"""End-to-end stages: scene generation, training, segmentation, scoring, timing."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from metricseg.cluster import hdbscan
from metricseg.errors import ValidationError
from metricseg.evaluation import ap_average, instances_from_cloud
from metricseg.geometry import PointCloud, devoxelize, read_point_cloud, voxelize, write_point_cloud
from metricseg.loss import loss_and_gradients
from metricseg.model import (
    INPUT_WIDTH, adam_step, backward, featurize, forward, init_model, lr_schedule, softmax_cross_entropy,
)
from metricseg.synth import CLASS_NAMES, augment, generate_scene

log = logging.getLogger("metricseg")

N_CLASSES = len(CLASS_NAMES)
SCENE_PATTERN = "scene_{:05d}.pc"
MANIFEST = "manifest.txt"
INSTANCE_SUFFIX = ".inst"


def scene_seed(base_seed, index):
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint32)[0])


# --- gen -------------------------------------------------------------------------


def gen_scenes(cfg, count, out_dir, start=0):
    """Write ``count`` scenes plus a manifest of per-scene seeds; returns the paths."""
    if count < 0:
        raise ValidationError("count must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_cfg = cfg.scene_config()
    rows, paths = [], []
    for i in range(start, start + count):
        s = scene_seed(cfg.seed, i)
        path = out / SCENE_PATTERN.format(i)
        write_point_cloud(generate_scene(scene_cfg, seed=s), path)
        rows.append(f"{path.name} {s}")
        paths.append(path)
    (out / MANIFEST).write_text(f"# base_seed {cfg.seed}\n" + "".join(r + "\n" for r in rows))
    return paths


def scene_files(scene_dir):
    d = Path(scene_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(d.glob("*.pc"))


def load_scenes(scene_dir):
    files = scene_files(scene_dir)
    if not files:
        raise ValidationError(f"no scenes in {scene_dir}")
    return [read_point_cloud(f) for f in files]


# --- train -----------------------------------------------------------------------


def prepare(cloud, cfg):
    grid = voxelize(cloud, cfg.voxel_size)
    return grid, featurize(grid, cfg.radius).matrix()


def foreground_labels(grid, background_ids):
    """Instance label per voxel for the metric loss; -1 on background or unlabeled voxels."""
    fg = ~np.isin(grid.semantic_ids, background_ids) & (grid.instance_ids > 0)
    return np.where(fg, grid.instance_ids, -1)


def new_model(cfg):
    return init_model(cfg.seed, INPUT_WIDTH, tuple(cfg.hidden_widths), cfg.embed_dim, N_CLASSES,
                      cfg.separate_semantic_net)


@dataclass
class StepLog:
    step: int
    lr: float
    semantic: float
    metric: float
    inter: float
    intra: float

    @property
    def total(self):
        return self.semantic + self.metric


def train_step(state, clouds, cfg):
    """One ADAM step on a batch of augmented scenes; returns the mean losses."""
    step = state.step
    rng = np.random.default_rng([cfg.seed, step])
    batch = np.sort(rng.choice(len(clouds), cfg.batch_size, replace=len(clouds) < cfg.batch_size))
    params = cfg.loss_params()
    aug_cfg = cfg.augment_config()
    grads = None
    sums = np.zeros(4)
    for j, idx in enumerate(batch):
        cloud = augment(clouds[idx], np.random.SeedSequence([cfg.seed, step, j]), aug_cfg)
        grid, x = prepare(cloud, cfg)
        emb, logits, cache = forward(state, x, return_cache=True)
        ce, g_logits = softmax_cross_entropy(logits, grid.semantic_ids)
        labels = foreground_labels(grid, cfg.background_ids)
        if (labels >= 0).any():
            metric, inter, intra, g_emb = loss_and_gradients(emb, labels, params)
        else:
            metric, inter, intra, g_emb = 0.0, 0.0, 0.0, np.zeros_like(emb)
        if not (math.isfinite(ce) and math.isfinite(metric)):
            raise ValidationError(
                f"non-finite loss at step {step}, scene {idx}: semantic={ce} metric={metric} (inter={inter}, intra={intra})"
            )
        g = backward(state, x, g_emb, cfg.semantic_weight * g_logits, cache=cache)
        if grads is None:
            grads = g
        else:
            for a, b in zip(grads, g):
                a += b
        sums += (cfg.semantic_weight * ce, metric, inter, intra)
    for a in grads:
        a /= len(batch)
    lr = lr_schedule(cfg.base_lr, step)
    adam_step(state, grads, lr)
    sums /= len(batch)
    return StepLog(step, lr, *map(float, sums))


def train(cfg, clouds, state=None, steps=None, callback=None):
    """Run ``steps`` (default ``cfg.steps``) training steps; returns (state, logs)."""
    if not clouds:
        raise ValidationError("no training scenes")
    state = state if state is not None else new_model(cfg)
    steps = cfg.steps if steps is None else steps
    logs = []
    for _ in range(steps):
        entry = train_step(state, clouds, cfg)
        logs.append(entry)
        if cfg.log_every and (entry.step % cfg.log_every == 0 or entry.step == steps - 1):
            log.info("step %d lr %.3g semantic %.5f metric %.5f (inter %.5f intra %.5f)",
                     entry.step, entry.lr, entry.semantic, entry.metric, entry.inter, entry.intra)
        if callback is not None:
            callback(entry, state)
    return state, logs


# --- segment ---------------------------------------------------------------------


@dataclass
class Segmentation:
    cloud: PointCloud
    instance_semantic: np.ndarray  # per instance id 1..K
    confidence: np.ndarray
    voxel_counts: np.ndarray
    embeddings: np.ndarray  # per voxel
    voxel_instances: np.ndarray  # per voxel, 0 = none

    @property
    def n_instances(self):
        return len(self.confidence)

    def confidence_map(self):
        return {i + 1: float(c) for i, c in enumerate(self.confidence)}


def _rescale(score):
    # same normalization as ClusterResult.confidences, across every cluster of the scene
    top = score.max()
    if not top > 0:
        return np.ones(len(score))
    return np.maximum(score / top, np.finfo(float).tiny)


def segment_cloud(state, cloud, cfg):
    """Voxelize, predict, drop predicted background, cluster embeddings, transfer labels back."""
    grid, x = prepare(cloud, cfg)
    emb, logits = forward(state, x)
    pred = np.argmax(logits, axis=1)
    fg = np.flatnonzero(~np.isin(pred, cfg.background_ids))
    voxel_inst = np.zeros(len(grid), dtype=np.int64)
    sem, conf, counts = [], np.zeros(0), np.zeros(0, dtype=np.int64)
    groups = [fg[pred[fg] == c] for c in np.unique(pred[fg])] if cfg.cluster_per_class else [fg]
    score, counts = [], []
    for group in groups:
        if not len(group):
            continue
        res = hdbscan(emb[group], cfg.cluster_params())
        score.append(res.stability / np.maximum(res.counts, 1))
        counts.append(res.counts)
        for c in range(res.n_clusters):
            members = group[res.labels == c]
            voxel_inst[members] = len(sem) + 1
            sem.append(int(np.bincount(pred[members]).argmax()))
    if sem:
        conf = _rescale(np.concatenate(score))
        counts = np.concatenate(counts)
    sem = np.array(sem, dtype=np.int64)
    voxel_sem = pred.copy()
    inst_mask = voxel_inst > 0
    voxel_sem[inst_mask] = sem[voxel_inst[inst_mask] - 1]
    out = PointCloud(cloud.positions, cloud.colors, devoxelize(grid, voxel_inst), devoxelize(grid, voxel_sem))
    return Segmentation(out, sem, conf, counts, emb, voxel_inst)


def write_segmentation(seg, path):
    """Labeled cloud in the v1 format plus a sidecar ``<path>.inst`` with one line per
    instance: id, semantic id, confidence, voxel count."""
    write_point_cloud(seg.cloud, path)
    lines = ["# instance semantic confidence voxels\n"]
    for i, (s, c, k) in enumerate(zip(seg.instance_semantic, seg.confidence, seg.voxel_counts), 1):
        lines.append(f"{i} {s} {float(c)!r} {k}\n")
    Path(f"{path}{INSTANCE_SUFFIX}").write_text("".join(lines))


def read_confidences(path):
    side = Path(f"{path}{INSTANCE_SUFFIX}")
    if not side.exists():
        return None
    out = {}
    for ln in side.read_text().splitlines():
        if ln.startswith("#") or not ln.strip():
            continue
        parts = ln.split()
        try:
            out[int(parts[0])] = float(parts[2])
        except (IndexError, ValueError):
            raise ValidationError(f"{side}: bad line {ln!r}") from None
    return out


def segment_files(state, cfg, inputs, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in inputs:
        seg = segment_cloud(state, read_point_cloud(f), cfg)
        dest = out / Path(f).name
        write_segmentation(seg, dest)
        paths.append(dest)
    return paths


# --- eval ------------------------------------------------------------------------


def collect_instances(pred_dir, gt_dir):
    """Pair files by name; returns (preds, gts, scene names)."""
    gt_files = {f.name: f for f in scene_files(gt_dir)}
    pred_files = {f.name: f for f in scene_files(pred_dir)}
    if pred_files:
        unpaired = sorted(set(gt_files) ^ set(pred_files))
        if unpaired:
            raise ValidationError("unpaired files: " + ", ".join(unpaired))
    preds, gts = [], []
    for name in sorted(gt_files):
        gts.extend(instances_from_cloud(read_point_cloud(gt_files[name]), scene=name))
        if name in pred_files:
            f = pred_files[name]
            preds.extend(instances_from_cloud(read_point_cloud(f), scene=name, confidences=read_confidences(f)))
    return preds, gts, sorted(gt_files)


def evaluate_dirs(pred_dir, gt_dir, out_dir=None):
    """Aggregate APReport over all scenes; per-scene and aggregate reports are
    written to ``out_dir`` when given."""
    preds, gts, names = collect_instances(pred_dir, gt_dir)
    report = ap_average(preds, gts)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            scene = ap_average([p for p in preds if p.scene == name], [g for g in gts if g.scene == name])
            scene.write(out / Path(name).stem, CLASS_NAMES)
        report.write(out / "aggregate", CLASS_NAMES)
    return report


# --- bench -----------------------------------------------------------------------

STAGES = ("voxelization", "embedding", "clustering", "devoxelization")


@dataclass
class BenchReport:
    runs: np.ndarray  # (n_runs, n_stages) seconds summed over the scene set
    n_scenes: int
    n_points: int

    def mean(self):
        return self.runs.mean(axis=0)

    def std(self):
        return self.runs.std(axis=0, ddof=1) if len(self.runs) > 1 else np.zeros(len(STAGES))

    def text(self):
        lines = [f"scenes {self.n_scenes} points {self.n_points} runs {len(self.runs)}",
                 f"{'stage':>15}  {'mean_s':>10}  {'std_s':>10}"]
        for name, m, s in zip(STAGES, self.mean(), self.std()):
            lines.append(f"{name:>15}  {m:10.6f}  {s:10.6f}")
        lines.append(f"{'total':>15}  {self.runs.sum(axis=1).mean():10.6f}  "
                     f"{(self.runs.sum(axis=1).std(ddof=1) if len(self.runs) > 1 else 0.0):10.6f}")
        return "\n".join(lines) + "\n"


def bench(state, clouds, cfg, runs=None):
    """Wall time of the four inference stages, summed over ``clouds``, per run."""
    runs = cfg.bench_runs if runs is None else runs
    if runs < 1 or not clouds:
        raise ValidationError("bench needs at least one run and one scene")
    table = np.zeros((runs, len(STAGES)))
    params = cfg.cluster_params()
    for r in range(runs):
        for cloud in clouds:
            t0 = time.perf_counter()
            grid = voxelize(cloud, cfg.voxel_size)
            t1 = time.perf_counter()
            emb, logits = forward(state, featurize(grid, cfg.radius).matrix())
            t2 = time.perf_counter()
            pred = np.argmax(logits, axis=1)
            fg = np.flatnonzero(~np.isin(pred, cfg.background_ids))
            voxel_inst = np.zeros(len(grid), dtype=np.int64)
            if len(fg):
                voxel_inst[fg] = hdbscan(emb[fg], params).labels + 1
            t3 = time.perf_counter()
            devoxelize(grid, voxel_inst)
            t4 = time.perf_counter()
            table[r] += (t1 - t0, t2 - t1, t3 - t2, t4 - t3)
    return BenchReport(table, len(clouds), int(sum(len(c) for c in clouds)))
