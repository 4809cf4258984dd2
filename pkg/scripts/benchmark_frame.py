"""Per-stage timing of the mapping loop on rendered 640x480 frames."""
import argparse
import tempfile
from pathlib import Path

import numpy as np

from objmap import PipelineConfig, run
from objmap.geometry import CameraIntrinsics
from objmap.synth import SceneSpec, load_scene, write_synthetic_dataset
from objmap.pipeline import STAGES

HERE = Path(__file__).parent


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--voxel-size", type=float, default=0.01)
    p.add_argument("--noise", type=float, default=0.0015, help="sigma = noise * z^2")
    p.add_argument("--smoothing-radius", type=int, default=2)
    p.add_argument("--normal-step", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    base = load_scene(HERE / "scenes" / "tabletop.yaml")
    intr = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
    scene = SceneSpec(base.primitives, base.trajectory[:args.frames], intr, args.noise, 0)
    cfg = PipelineConfig(voxel_size=args.voxel_size, smoothing_radius=args.smoothing_radius,
                         normal_step=args.normal_step, threads=args.threads)
    with tempfile.TemporaryDirectory() as tmp:
        data = write_synthetic_dataset(scene, Path(tmp) / "data", gt_voxel_size=None)
        res = run(data, cfg)
    print(f"{res.frames_integrated} frames, {res.volume.num_blocks} blocks")
    for s in STAGES:
        print(f"{s:>13s} {1000 * np.mean([r.timings.get(s, 0.0) for r in res.records]):8.1f} ms")
    print(f"{'total':>13s} {1000 * np.mean([r.total for r in res.records]):8.1f} ms")


if __name__ == "__main__":
    main()
