"""Persistence: datasets, network checkpoints, results logs.

All formats round-trip byte-exactly:

Dataset directory
    manifest.json            canonical JSON (sorted keys, no whitespace)
    images/<stem>.{r,g,b}.pgm  one 16-bit binary PGM (P5, maxval 65535) per
                               channel; float values quantize to round(v*65535)

Checkpoint file (single binary blob)
    magic   b"PLABCKPT"
    u64 LE  header length, followed by that many bytes of canonical JSON:
            {format_version, arch, head_channels, parameter_names,
             state_names, extra}
    tensor records, one per parameter then per state array, each:
            u64 LE name length, name UTF-8,
            u64 LE ndim, u64 LE extents...,
            float32 LE data (row-major)
    trailer b"PLABEND." followed by u64 LE record count

Results log
    one canonical-JSON record per line, appended
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import hourglass
from .datasets import Dataset, Sample
from .keypoints import NUM_JOINTS, PoseAnnotation

FORMAT_VERSION = 1

_CKPT_MAGIC = b"PLABCKPT"
_CKPT_TRAILER = b"PLABEND."


class StorageError(ValueError):
    pass


class CheckpointError(StorageError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --- PGM ------------------------------------------------------------------------


def write_pgm16(path, plane):
    """16-bit binary PGM from a float plane in [0, 1]."""
    q = np.clip(np.rint(np.asarray(plane, dtype=np.float64) * 65535.0), 0, 65535)
    q = q.astype(">u2")
    h, w = plane.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm16(path):
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise StorageError(f"{path}: not a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=">u2", count=h * w).reshape(h, w)
    return (data.astype(np.float32) / 65535.0).astype(np.float32)


# --- datasets --------------------------------------------------------------------


def save_dataset(dataset, out_dir):
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(dataset.samples):
        stem = f"img_{i:05d}"
        for suffix, plane in zip(("r", "g", "b"), sample.image):
            write_pgm16(images_dir / f"{stem}.{suffix}.pgm", plane)
        ann = sample.annotation
        entries.append({
            "image": stem,
            "image_id": ann.image_id,
            "head_len": float(ann.head_len),
            "joints": [
                {"id": j, "x": float(ann.positions[j, 0]),
                 "y": float(ann.positions[j, 1]), "visible": bool(ann.visible[j])}
                for j in range(NUM_JOINTS)
            ],
        })
    manifest = {
        "version": FORMAT_VERSION,
        "resolution": int(dataset.resolution),
        "count": len(dataset.samples),
        "provenance": dataset.provenance,
        "samples": entries,
    }
    (out_dir / "manifest.json").write_text(canonical_json(manifest) + "\n",
                                           encoding="utf-8")
    return out_dir


def load_dataset(in_dir):
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise StorageError(f"missing dataset manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise StorageError(
            f"dataset format version mismatch: file has {version}, "
            f"this build reads {FORMAT_VERSION}"
        )
    resolution = int(manifest["resolution"])
    samples = []
    for entry in manifest["samples"]:
        planes = [read_pgm16(in_dir / "images" / f"{entry['image']}.{s}.pgm")
                  for s in ("r", "g", "b")]
        image = np.stack(planes, axis=0)
        positions = np.zeros((NUM_JOINTS, 2))
        visible = np.zeros(NUM_JOINTS, dtype=bool)
        for j in entry["joints"]:
            positions[j["id"]] = (j["x"], j["y"])
            visible[j["id"]] = j["visible"]
        ann = PoseAnnotation(positions=positions, visible=visible,
                             head_len=entry["head_len"],
                             image_id=entry.get("image_id", entry["image"]))
        samples.append(Sample(image=image, annotation=ann))
    if len(samples) != manifest["count"]:
        raise StorageError(
            f"dataset manifest count {manifest['count']} != {len(samples)} samples"
        )
    return Dataset(samples=samples, resolution=resolution,
                   provenance=manifest.get("provenance", {}))


# --- tensor records / checkpoints ---------------------------------------------------


def _write_record(f, name, array):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<Q", len(encoded)))
    f.write(encoded)
    arr = np.ascontiguousarray(array, dtype="<f4")
    f.write(struct.pack("<Q", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<Q", extent))
    f.write(arr.tobytes())


def _read_exact(f, n, context):
    blob = f.read(n)
    if len(blob) != n:
        raise CheckpointError(f"checkpoint truncated while reading {context}")
    return blob


def _read_record(f, index):
    ctx = f"record {index}"
    (name_len,) = struct.unpack("<Q", _read_exact(f, 8, ctx))
    name = _read_exact(f, name_len, ctx).decode("utf-8")
    ctx = f"record {index} ({name})"
    (ndim,) = struct.unpack("<Q", _read_exact(f, 8, ctx))
    shape = tuple(struct.unpack("<Q", _read_exact(f, 8, ctx))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 4 * count, ctx), dtype="<f4").reshape(shape)
    return name, np.array(data, dtype=np.float32)


def save_checkpoint(path, net, extra=None):
    """Persist a float32 network (parameters + batchnorm state) to one file."""
    if net._params.dtype != np.float32:
        raise CheckpointError("only float32 networks are checkpointed")
    header = {
        "format_version": FORMAT_VERSION,
        "arch": net.arch.to_dict(),
        "head_channels": list(net.head_channels),
        "parameter_names": net.parameter_names(),
        "state_names": list(net.state.keys()),
        "extra": extra or {},
    }
    blob = canonical_json(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = 0
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in header["parameter_names"]:
            _write_record(f, name, net.parameters[name].data)
            records += 1
        for name in header["state_names"]:
            _write_record(f, name, net.state[name])
            records += 1
        f.write(_CKPT_TRAILER)
        f.write(struct.pack("<Q", records))
    return path


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, name -> float32 array)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version mismatch: file has {version}, "
                f"this build reads {FORMAT_VERSION}"
            )
        names = list(header["parameter_names"]) + list(header["state_names"])
        arrays = {}
        for i, expected in enumerate(names):
            name, array = _read_record(f, i)
            if name != expected:
                raise CheckpointError(
                    f"checkpoint record {i} is {name!r}, expected {expected!r}"
                )
            arrays[name] = array
        trailer = _read_exact(f, len(_CKPT_TRAILER), "trailer")
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "record count"))
        if trailer != _CKPT_TRAILER or count != len(names):
            raise CheckpointError(f"{path}: corrupt trailer")
    return header, arrays


def load_checkpoint(path):
    """Reconstruct the network a checkpoint describes, bit-exactly."""
    header, arrays = read_checkpoint(path)
    arch = hourglass.HourglassArch.from_dict(header["arch"])
    net = hourglass.build(arch, seed=0, head_channels=header["head_channels"])
    if net.parameter_names() != header["parameter_names"]:
        raise CheckpointError("checkpoint parameter inventory does not match its arch")
    for name, tensor in net.parameters.items():
        np.copyto(tensor.data, arrays[name])
    for name in net.state:
        np.copyto(net.state[name], arrays[name])
    return net, header


# --- results log --------------------------------------------------------------------


def append_result(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(canonical_json(record) + "\n")


def read_results(path):
    path = Path(path)
    if not path.exists():
        raise StorageError(f"missing results log: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def results_log_digest(path, ignore_fields=("wall_time",)):
    """Hash of a results log with volatile fields (wall-clock time) masked out.

    Everything except the listed fields must match bit-for-bit across reruns
    of a seeded pipeline; wall time is physical and cannot be deterministic.
    """
    h = hashlib.sha256()
    for record in read_results(path):
        cleaned = {k: v for k, v in record.items() if k not in ignore_fields}
        h.update(canonical_json(cleaned).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
