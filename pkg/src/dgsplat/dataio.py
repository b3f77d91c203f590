"""Persistence: datasets, checkpoints, images, CSV tables.

Everything round-trips bit-exactly at 64-bit.  The checkpoint is a single
little-endian binary file of length-prefixed sections; datasets are a
directory with a JSON manifest, per-frame images stored both as 8-bit PNG
(for humans) and raw float32 ``.npy`` (for exact comparisons), and an
optional ground-truth ``.npz``.

CSV schemas:
  loss curve:  step,loss_c,loss_t,wall_time
  metrics:     frame,timestamp,psnr,ssim
  ablation:    one column per varied config field, then seed,psnr,ssim
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile

import numpy as np
from PIL import Image

from dgsplat.autodiff import ContractError
from dgsplat.camera import Camera
from dgsplat.synth import FrameSet, GroundTruth

CHECKPOINT_MAGIC = b"DGSC"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Dataset manifest is missing, malformed, or inconsistent."""


class CheckpointError(ValueError):
    """Checkpoint file cannot be parsed or has an unsupported version."""


# ---------------------------------------------------------------------------
# Atomic writes


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Images


def save_png(path: str, image: np.ndarray) -> None:
    """Clip to [0,1], scale to 8 bits, no gamma."""
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def save_raw(path: str, image: np.ndarray) -> None:
    np.save(path, np.asarray(image, dtype=np.float32))


def load_raw(path: str) -> np.ndarray:
    return np.load(path)


# ---------------------------------------------------------------------------
# Datasets


def save_dataset(path: str, frames: FrameSet, ground_truth: GroundTruth | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    frame_dir = os.path.join(path, "frames")
    os.makedirs(frame_dir, exist_ok=True)

    entries = []
    for i in range(frames.n_frames):
        for j in range(frames.n_cameras):
            stem = f"t{i:03d}_c{j}"
            save_png(os.path.join(frame_dir, stem + ".png"), frames.images[i, j])
            save_raw(os.path.join(frame_dir, stem + ".npy"), frames.images[i, j])
            entries.append({
                "t_index": i, "cam_index": j,
                "timestamp": float(frames.timestamps[i]),
                "png": f"frames/{stem}.png", "raw": f"frames/{stem}.npy",
            })

    gt_name = None
    if ground_truth is not None:
        gt_name = "ground_truth.npz"
        np.savez(
            os.path.join(path, gt_name),
            positions=ground_truth.positions,
            rot_quats=ground_truth.rot_quats,
            log_scales=ground_truth.log_scales,
            opacity_logits=ground_truth.opacity_logits,
            colors=ground_truth.colors,
            kinds=np.array(ground_truth.kinds),
            spec=np.frombuffer(
                json.dumps(ground_truth.spec, sort_keys=True).encode(), dtype=np.uint8),
        )

    manifest = {
        "format": "dgsplat-dataset",
        "version": MANIFEST_VERSION,
        "timestamps": [float(t) for t in frames.timestamps],
        "cameras": [c.to_dict() for c in frames.cameras],
        "bounds": frames.bounds.tolist(),
        "frames": entries,
        "ground_truth": gt_name,
    }
    _atomic_write(os.path.join(path, "manifest.json"),
                  json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_dataset(path: str):
    """Returns (FrameSet, GroundTruth | None); raw files are authoritative."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, "rb") as f:
            manifest = json.loads(f.read())
    except FileNotFoundError:
        raise ManifestError(f"no manifest at {manifest_path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {manifest_path}: {e}") from None

    for key in ("timestamps", "cameras", "frames", "version"):
        if key not in manifest:
            raise ManifestError(f"manifest missing field '{key}'")
    if manifest["version"] > MANIFEST_VERSION:
        raise ManifestError(
            f"dataset version {manifest['version']} is newer than supported "
            f"{MANIFEST_VERSION}")

    timestamps = np.array(manifest["timestamps"], dtype=np.float64)
    if len(np.unique(timestamps)) != len(timestamps):
        raise ManifestError("manifest contains duplicate timestamps")
    cameras = [Camera.from_dict(d) for d in manifest["cameras"]]
    t_count, k_count = len(timestamps), len(cameras)
    h, w = cameras[0].height, cameras[0].width

    images = np.empty((t_count, k_count, h, w, 3), dtype=np.float32)
    seen = np.zeros((t_count, k_count), dtype=bool)
    for entry in manifest["frames"]:
        i, j = entry["t_index"], entry["cam_index"]
        raw_path = os.path.join(path, entry["raw"])
        try:
            img = load_raw(raw_path)
        except Exception as e:
            raise IOError(f"cannot read frame t={i} cam={j} ({raw_path}): {e}") from None
        if img.shape != (h, w, 3):
            raise ContractError(
                f"frame t={i} cam={j} has shape {img.shape}, camera says {(h, w, 3)}")
        images[i, j] = img
        seen[i, j] = True
    if not seen.all():
        missing = np.argwhere(~seen)[0]
        raise ManifestError(f"manifest lists no file for frame t={missing[0]} cam={missing[1]}")

    frames = FrameSet(timestamps=timestamps, cameras=cameras, images=images,
                      bounds=np.array(manifest["bounds"], dtype=np.float64))

    gt = None
    if manifest.get("ground_truth"):
        with np.load(os.path.join(path, manifest["ground_truth"])) as z:
            gt = GroundTruth(
                positions=z["positions"], rot_quats=z["rot_quats"],
                log_scales=z["log_scales"], opacity_logits=z["opacity_logits"],
                colors=z["colors"], kinds=tuple(str(k) for k in z["kinds"]),
                spec=json.loads(bytes(z["spec"]).decode()),
            )
    return frames, gt


# ---------------------------------------------------------------------------
# Checkpoints


_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            dt = np.dtype("<f8") if arr.dtype.kind == "f" else np.dtype("<i8")
        arr = arr.astype(dt, copy=False)
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", _DTYPE_CODES[np.dtype(dt)], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def _unpack_arrays(buf: bytes) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    off = 0
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(buf[off:off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
    return arrays


def write_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomic single-file checkpoint: header + 'meta' + 'arrays' sections."""
    scalar_size = 8 if meta.get("precision", 64) == 64 else 4
    header = CHECKPOINT_MAGIC + struct.pack("<HB", CHECKPOINT_VERSION, scalar_size)
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("arrays", _pack_arrays(arrays)),
    ]
    parts = [header]
    for name, payload in sections:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    _atomic_write(path, b"".join(parts))


def read_checkpoint(path: str):
    """Returns (meta, arrays); refuses newer format versions explicitly."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a dgsplat checkpoint (bad magic)")
    version, _scalar = struct.unpack_from("<HB", buf, 4)
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    off = 7
    sections = {}
    while off < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        sections[name] = buf[off:off + plen]
        off += plen
    if "meta" not in sections or "arrays" not in sections:
        raise CheckpointError(f"{path} is missing required sections")
    return json.loads(sections["meta"]), _unpack_arrays(sections["arrays"])


def save_checkpoint(state, path: str) -> None:
    """Serialize a TrainState (parameters, moments, RNG, history) atomically."""
    from dgsplat.train import checkpoint_payload
    meta, arrays = checkpoint_payload(state)
    write_checkpoint(path, meta, arrays)


def load_checkpoint(path: str):
    """Rebuild the TrainState bit-exactly; resumed training continues as if
    it had never stopped."""
    from dgsplat.train import state_from_payload
    meta, arrays = read_checkpoint(path)
    return state_from_payload(meta, arrays)


# ---------------------------------------------------------------------------
# CSV


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: str):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]
