"""Line-delimited `.pool` files.

A pool file starts with a versioned header line::

    truncpose-v1 pool role=<role> seed=<seed> count=<n> grid=<G>

followed by one JSON record per frame. Grids are quantized to uint8 and
base64-encoded; keypoints, flags, optional truth parameters, and meta
travel as plain JSON. Reading a record restores grids as float32 in
[0, 1]. Writing is deterministic: identical pools give identical bytes.
"""

from __future__ import annotations

import base64
import json
import os

import numpy as np

from .errors import IoError
from .kinematics import KeypointSet, N_JOINTS, PoseParams
from .synth import DatasetPool, Frame, FrameMeta, GRID_SIZE

POOL_MAGIC = "truncpose-v1 pool"


def _encode_grid(grid: np.ndarray) -> str:
    q = np.clip(np.rint(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255)
    return base64.b64encode(q.astype(np.uint8).tobytes()).decode("ascii")


def _decode_grid(blob: str, channels: int = 2, size: int = GRID_SIZE) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(blob), dtype=np.uint8)
    if raw.size != channels * size * size:
        raise IoError("grid payload has wrong size")
    return (raw.reshape(channels, size, size).astype(np.float32)) / np.float32(255.0)


def _frame_record(frame: Frame) -> dict:
    kxy = [
        None if v == 0 else [float(x), float(y)]
        for (x, y), v in zip(frame.keypoints.xy, frame.keypoints.vis)
    ]
    rec = {
        "grid": _encode_grid(frame.grid),
        "kp": kxy,
        "vis": [int(v) for v in frame.keypoints.vis],
        "truth": None if frame.truth is None else [float(v) for v in frame.truth.as_vector()],
        "meta": {
            "pool": frame.meta.pool,
            "index": frame.meta.index,
            "archetype": frame.meta.archetype,
            "lineage": [[float(c) for c in rect] for rect in frame.meta.lineage],
            "pseudo": frame.meta.pseudo,
            "category": frame.meta.category,
        },
    }
    return rec


def _record_frame(rec: dict) -> Frame:
    xy = np.full((N_JOINTS, 2), np.nan)
    for j, pt in enumerate(rec["kp"]):
        if pt is not None:
            xy[j] = pt
    vis = np.asarray(rec["vis"], dtype=np.int8)
    truth = None if rec["truth"] is None else PoseParams.from_vector(np.asarray(rec["truth"]))
    m = rec["meta"]
    meta = FrameMeta(
        pool=m["pool"], index=m["index"], archetype=m["archetype"],
        lineage=[tuple(r) for r in m["lineage"]],
        pseudo=m["pseudo"], category=m["category"],
    )
    return Frame(grid=_decode_grid(rec["grid"]), keypoints=KeypointSet(xy, vis),
                 truth=truth, meta=meta)


def write_pool(pool: DatasetPool, path) -> None:
    header = (f"{POOL_MAGIC} role={pool.role} seed={pool.seed} "
              f"count={len(pool.frames)} grid={GRID_SIZE}\n")
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header)
        for frame in pool.frames:
            fh.write(json.dumps(_frame_record(frame), sort_keys=True,
                                separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def read_pool(path) -> DatasetPool:
    if not os.path.exists(path):
        raise IoError(f"pool file not found: {path}")
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(POOL_MAGIC):
            raise IoError(f"bad pool header in {path}")
        fields = dict(kv.split("=", 1) for kv in header[len(POOL_MAGIC):].split())
        frames = []
        for line in fh:
            line = line.strip()
            if line:
                frames.append(_record_frame(json.loads(line)))
    count = int(fields.get("count", -1))
    if count != len(frames):
        raise IoError(f"pool {path} declares {count} frames, found {len(frames)}")
    return DatasetPool(frames=frames, role=fields.get("role", ""),
                       seed=int(fields.get("seed", 0)))
