"""Generate scenes, train, segment held-out scenes and print the AP table.

    python3 scripts/run_end_to_end.py --out runs/e2e [--steps 5000] [--train 200] [--test 20]

Also writes a per-voxel distance-to-mean heatmap for the first held-out scene.
"""

import argparse
import logging
import time
from pathlib import Path

from metricseg import pipeline
from metricseg.config import load_config
from metricseg.evaluation import export_distance_heatmap
from metricseg.model import forward, save_checkpoint
from metricseg.synth import CLASS_NAMES


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    out = args.out
    t0 = time.perf_counter()
    pipeline.gen_scenes(cfg, args.train, out / "train")
    pipeline.gen_scenes(cfg, args.test, out / "test", start=args.train)
    print(f"gen {time.perf_counter() - t0:.1f} s")

    t = time.perf_counter()
    state, logs = pipeline.train(cfg, pipeline.load_scenes(out / "train"))
    save_checkpoint(state, out / "model.ckpt")
    print(f"train {time.perf_counter() - t:.1f} s, loss {logs[0].total:.4f} -> {logs[-1].total:.4f}")

    t = time.perf_counter()
    test_files = pipeline.scene_files(out / "test")
    pipeline.segment_files(state, cfg, test_files, out / "pred")
    report = pipeline.evaluate_dirs(out / "pred", out / "test", out / "report")
    print(f"segment + eval {time.perf_counter() - t:.1f} s")
    print(report.table(CLASS_NAMES))

    cloud = pipeline.load_scenes(out / "test")[0]
    grid, x = pipeline.prepare(cloud, cfg)
    labels = pipeline.foreground_labels(grid, cfg.background_ids)
    export_distance_heatmap(forward(state, x)[0], labels, out / "heatmap.pc", grid.positions)
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
