"""Atomic file writes, run manifests and keypoint-track containers."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import yaml

TRACK_COLUMNS = ("frame", "kp_id", "u", "v", "confidence", "sigma2_x", "sigma2_y", "sigma2_xy")
LOSS_COLUMNS = ("step", "recon", "rot", "sep", "total")
TRACK_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.yaml"


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    _atomic_write(path, data)


def atomic_write_text(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        with open(q, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, argv: list[str], config: Mapping[str, Any] | None = None,
                   inputs: Mapping[str, str] | None = None, seed: int | None = None) -> Path:
    from . import __version__

    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "config": dict(config) if config else {},
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in (inputs or {}).items() if v and Path(v).exists()},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = Path(out_dir) / MANIFEST_NAME
    atomic_write_text(path, yaml.safe_dump(manifest, sort_keys=False))
    return path


def read_manifest(path) -> dict:
    return yaml.safe_load(Path(path).read_text())


# --------------------------------------------------------------------------- keypoint tracks

def tracks_to_records(keypoints: np.ndarray, confidence: np.ndarray, covariance: np.ndarray,
                      frame_indices: Iterable[int] | None = None):
    """Flatten (T, K, 2) keypoints, (T, K) confidence and (T, K, 3) covariance into per-row tuples."""
    T, K = keypoints.shape[:2]
    frames = list(frame_indices) if frame_indices is not None else list(range(T))
    for t in range(T):
        for k in range(K):
            yield (frames[t], k, keypoints[t, k, 0], keypoints[t, k, 1], confidence[t, k],
                   covariance[t, k, 0], covariance[t, k, 1], covariance[t, k, 2])


def save_tracks_csv(path, keypoints, confidence, covariance, frame_indices=None) -> None:
    write_csv(path, TRACK_COLUMNS, tracks_to_records(keypoints, confidence, covariance, frame_indices))


def load_tracks_csv(path) -> dict[str, np.ndarray]:
    header, rows = read_csv(path)
    if tuple(header) != TRACK_COLUMNS:
        raise ValueError(f"unexpected keypoint track header {header}")
    arr = np.array(rows, dtype=np.float64)
    return _records_to_arrays(arr)


def _records_to_arrays(arr: np.ndarray) -> dict[str, np.ndarray]:
    frames = np.unique(arr[:, 0].astype(np.int64))
    kps = np.unique(arr[:, 1].astype(np.int64))
    T, K = len(frames), len(kps)
    if len(arr) != T * K:
        raise ValueError("keypoint track table is not a complete (frame, keypoint) grid")
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order].reshape(T, K, -1)
    return {
        "frame": frames,
        "keypoints": arr[:, :, 2:4],
        "confidence": arr[:, :, 4],
        "covariance": arr[:, :, 5:8],
    }


def save_tracks_npz(path, keypoints, confidence, covariance, frame_indices=None) -> None:
    T = keypoints.shape[0]
    buf = io.BytesIO()
    np.savez(buf, format_version=np.int64(TRACK_FORMAT_VERSION),
             frame=np.asarray(frame_indices if frame_indices is not None else np.arange(T), dtype=np.int64),
             keypoints=np.asarray(keypoints, dtype=np.float64), confidence=np.asarray(confidence, dtype=np.float64),
             covariance=np.asarray(covariance, dtype=np.float64))
    atomic_write_bytes(path, buf.getvalue())


def load_tracks_npz(path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != TRACK_FORMAT_VERSION:
            raise ValueError(f"unsupported keypoint track format version {version}")
        return {k: z[k] for k in ("frame", "keypoints", "confidence", "covariance")}


def load_tracks(path) -> dict[str, np.ndarray]:
    return load_tracks_npz(path) if str(path).endswith(".npz") else load_tracks_csv(path)
