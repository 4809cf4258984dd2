"""Render the tabletop scene, map it, score the map and export meshes.

    python scripts/run_synthetic_demo.py [--work DIR] [--voxel-size 0.02]
"""
import argparse
import tempfile
from pathlib import Path

from objmap.cli import main as objmap

HERE = Path(__file__).parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scene", default=str(HERE / "scenes" / "tabletop.yaml"))
    p.add_argument("--work", help="working directory (default: a temporary one)")
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--stride", type=int, default=1)
    args = p.parse_args()

    work = Path(args.work or tempfile.mkdtemp(prefix="objmap-demo-"))
    data, out = work / "data", work / "run"
    vs = str(args.voxel_size)
    steps = [
        ["synth", args.scene, "--out", str(data), "--voxel-size", vs],
        ["run", str(data), "--out", str(out), "--set", f"voxel_size={vs}", "--stride", str(args.stride)],
        ["eval", str(out / "map.objmap"), str(data / "groundtruth.npz"), "--csv", str(out / "ap.csv")],
        ["export", str(out / "map.objmap"), "--out", str(out / "export")],
    ]
    for argv in steps:
        print("$ objmap", " ".join(argv))
        code = objmap(argv)
        if code:
            raise SystemExit(code)
    print(f"outputs in {work}")


if __name__ == "__main__":
    main()
