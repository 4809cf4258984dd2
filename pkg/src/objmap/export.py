from __future__ import annotations

import csv
from pathlib import Path

from .mesh import extract_mesh, write_ply
from .volume import TsdfVolume

WHAT = ("mesh", "segments", "counts")


def export(volume: TsdfVolume | str | Path, out_dir, what=WHAT) -> list[Path]:
    """Write meshes / segment table / count tables; returns the files written."""
    vol = volume if isinstance(volume, TsdfVolume) else TsdfVolume.load(volume)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "mesh" in what:
        mesh = extract_mesh(vol, "all")
        write_ply(mesh, out / "mesh.ply")
        written.append(out / "mesh.ply")
        inst_dir = out / "instances"
        inst_dir.mkdir(exist_ok=True)
        for inst, m in extract_mesh(vol, "instance").items():
            p = inst_dir / f"instance_{inst:04d}.ply"
            write_ply(m, p)
            written.append(p)
    if "segments" in what:
        p = out / "segments.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", "instance", "class_id", "voxels"])
            for s in vol.extract_segments():
                w.writerow([s.label, s.instance, s.class_id, s.size])
        written.append(p)
    if "counts" in what:
        for name, table, col in (("phi", vol.counts.phi, "instance"), ("psi", vol.counts.psi, "class_id")):
            p = out / f"{name}.csv"
            with open(p, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["label", col, "count"])
                for (a, b), c in sorted(table.items()):
                    w.writerow([a, b, c])
            written.append(p)
    return written


def read_counts(path) -> dict:
    with open(path) as f:
        rows = list(csv.reader(f))[1:]
    return {(int(a), int(b)): int(c) for a, b, c in rows}
