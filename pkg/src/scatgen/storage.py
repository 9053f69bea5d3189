"""Flat binary tensor blobs, dataset directories, checkpoints and CSV/JSON outputs."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .dataset import SampleRecord
from .model import ModelConfig, ScattererNet
from .training import ArrayData

MAGIC = b"SSG1"
FORMAT_VERSION = 1

BAD_MAGIC = "BAD_MAGIC"
TRUNCATED = "TRUNCATED"
COUNT_MISMATCH = "COUNT_MISMATCH"
DIM_MISMATCH = "DIM_MISMATCH"
MISSING_MANIFEST = "MISSING_MANIFEST"
DIGEST_MISMATCH = "DIGEST_MISMATCH"
LOCKED = "LOCKED"


class StorageError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


# ---------------------------------------------------------------------- blobs

def encode_blob(array) -> bytes:
    a = np.array(array, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode_blob(buf: bytes, expect_shape=None) -> np.ndarray:
    if buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise StorageError(TRUNCATED, "header truncated")
        raise StorageError(BAD_MAGIC, f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise StorageError(TRUNCATED, "header truncated")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise StorageError(TRUNCATED, "dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    size = len(buf) - head
    if size < 4 * n:
        raise StorageError(TRUNCATED, f"payload holds {size} bytes, dims {dims} need {4 * n}")
    if size > 4 * n:
        raise StorageError(DIM_MISMATCH, f"payload holds {size} bytes, dims {dims} need {4 * n}")
    if expect_shape is not None and tuple(dims) != tuple(expect_shape):
        raise StorageError(DIM_MISMATCH, f"dims {tuple(dims)} != expected {tuple(expect_shape)}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=head).reshape(dims).astype(np.float32)


def write_blob(path, array):
    Path(path).write_bytes(encode_blob(array))


def read_blob(path, expect_shape=None) -> np.ndarray:
    return decode_blob(Path(path).read_bytes(), expect_shape)


# ---------------------------------------------------------------------- json / csv

def dump_json(obj, path):
    # json writes floats with repr, which round-trips binary64 exactly
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in columns})


HISTORY_COLUMNS = ["epoch", "lr", "train_nmse", "val_nmse"]
TRANSFER_COLUMNS = ["k", "seed", "p_pos", "p_num"]
REPORT_COLUMNS = ["sample", "p_pos", "p_num", "nmse"]
TACF_COLUMNS = ["lag_s", "tacf_pred", "tacf_oracle"]


def write_history(path, history: list[dict]):
    write_csv(path, history, HISTORY_COLUMNS)


# ---------------------------------------------------------------------- locking

@contextlib.contextmanager
def exclusive_dir(path):
    """Hold ``<dir>/.lock`` for the duration of a write; a second writer fails fast."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StorageError(LOCKED, f"{path} is locked by another writer") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        yield path
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------- datasets

def _sample_paths(root: Path, i: int):
    base = root / "samples" / f"{i:06d}"
    return base.with_suffix(".json"), Path(f"{base}.features.ssg"), Path(f"{base}.target.ssg")


def write_dataset(records: list[SampleRecord], manifest: dict, directory) -> Path:
    root = Path(directory)
    if len(records) != manifest["sample_count"]:
        raise StorageError(COUNT_MISMATCH, "manifest sample_count differs from the number of records")
    with exclusive_dir(root):
        (root / "samples").mkdir(exist_ok=True)
        for old in (root / "samples").iterdir():
            old.unlink()
        for i, r in enumerate(records):
            meta_p, feat_p, tgt_p = _sample_paths(root, i)
            dump_json(r.meta(), meta_p)
            write_blob(feat_p, r.features)
            write_blob(tgt_p, np.stack([r.target_raw, r.target_norm]))
        dump_json(manifest, root / "manifest.json")
    return root


def read_dataset(directory) -> tuple[dict, Iterator[SampleRecord]]:
    """Validate the whole directory (headers, sizes, counts) up front, then stream records lazily."""
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise StorageError(MISSING_MANIFEST, f"{mpath} not found")
    manifest = load_json(mpath)
    count = int(manifest["sample_count"])
    on_disk = sorted((root / "samples").glob("*.json")) if (root / "samples").exists() else []
    if len(on_disk) != count:
        raise StorageError(COUNT_MISMATCH, f"manifest declares {count} samples, found {len(on_disk)}")
    fshape = (3, manifest["m_x"], manifest["m_y"])
    tshape = (2, manifest["n_x"], manifest["n_y"])
    for i in range(count):
        meta_p, feat_p, tgt_p = _sample_paths(root, i)
        if not (meta_p.exists() and feat_p.exists() and tgt_p.exists()):
            raise StorageError(COUNT_MISMATCH, f"sample {i} is incomplete")
        _check_header(feat_p, fshape)
        _check_header(tgt_p, tshape)

    def records():
        for i in range(count):
            meta_p, feat_p, tgt_p = _sample_paths(root, i)
            meta = load_json(meta_p)
            target = read_blob(tgt_p, tshape)
            yield SampleRecord(
                snapshot=meta["snapshot"], link=meta["link"], features=read_blob(feat_p, fshape),
                target_raw=target[0], target_norm=target[1], tx=tuple(meta["tx"]), rx=tuple(meta["rx"]),
                f_c=meta["f_c"], bounds=tuple(meta["bounds"]), n_scatterers=meta.get("n_scatterers", 0),
                dropped=meta.get("dropped", 0),
            )

    return manifest, records()


def _check_header(path: Path, shape):
    with open(path, "rb") as fh:
        head = fh.read(8 + 4 * len(shape))
    if head[:4] != MAGIC:
        raise StorageError(BAD_MAGIC, f"bad magic in {path.name}")
    if len(head) < 8 + 4 * len(shape):
        raise StorageError(TRUNCATED, f"{path.name} header truncated")
    rank = struct.unpack_from("<I", head, 4)[0]
    dims = struct.unpack_from(f"<{len(shape)}I", head, 8)
    if rank != len(shape) or tuple(dims) != tuple(shape):
        raise StorageError(DIM_MISMATCH, f"{path.name}: dims {dims} (rank {rank}) != expected {tuple(shape)}")
    want = 8 + 4 * len(shape) + 4 * int(np.prod(shape))
    have = path.stat().st_size
    if have < want:
        raise StorageError(TRUNCATED, f"{path.name}: {have} bytes, expected {want}")
    if have > want:
        raise StorageError(DIM_MISMATCH, f"{path.name}: {have} bytes, expected {want}")


def load_arrays(directory) -> tuple[dict, ArrayData, list[SampleRecord]]:
    manifest, it = read_dataset(directory)
    records = list(it)
    data = ArrayData(np.stack([r.features for r in records]), np.stack([r.target_norm for r in records]),
                     np.array([r.f_c for r in records]))
    return manifest, data, records


# ---------------------------------------------------------------------- checkpoints

def state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy().astype("<f4")).tobytes())
    return h.hexdigest()


def save_checkpoint(model: ScattererNet, directory, extra: dict | None = None, steps: int = 0) -> Path:
    root = Path(directory)
    state = model.state_dict()
    with exclusive_dir(root):
        pdir = root / "params"
        pdir.mkdir(exist_ok=True)
        for old in pdir.iterdir():
            old.unlink()
        files = {}
        for i, (name, t) in enumerate(state.items()):
            fname = f"{i:04d}.ssg"
            write_blob(pdir / fname, t.detach().cpu().numpy())
            files[name] = {"file": fname, "shape": list(t.shape)}
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": "scatgen-checkpoint",
            "model_config": model.cfg.to_dict(),
            "backbone_digest": model.backbone_digest(),
            "state_digest": state_digest(state),
            "step_count": int(steps),
            "params": files,
            **(extra or {}),
        }
        dump_json(manifest, root / "manifest.json")
    return root


def load_checkpoint(directory) -> tuple[ScattererNet, dict]:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise StorageError(MISSING_MANIFEST, f"{mpath} not found")
    manifest = load_json(mpath)
    cfg = ModelConfig(**{**manifest["model_config"], "lora_targets": tuple(manifest["model_config"]["lora_targets"])})
    model = ScattererNet(cfg)
    own = model.state_dict()
    if set(own) != set(manifest["params"]):
        raise StorageError(COUNT_MISMATCH, "checkpoint parameter set does not match the model config")
    state = {}
    for name, entry in manifest["params"].items():
        arr = read_blob(root / "params" / entry["file"], tuple(own[name].shape))
        state[name] = torch.as_tensor(arr, dtype=own[name].dtype)
    model.load_state_dict(state)
    if model.backbone_digest() != manifest["backbone_digest"]:
        raise StorageError(DIGEST_MISMATCH, "backbone digest differs from the checkpoint manifest")
    return model, manifest
