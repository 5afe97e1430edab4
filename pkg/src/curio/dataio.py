"""On-disk artifacts: dataset containers, checkpoints, run configs.

Everything is little-endian and explicit so round-trips are bitwise.
Images travel as 32-bit floats (the training dtype), scalar metadata as
64-bit floats. Every artifact header embeds the seed and a 16-byte hash
of the settings that produced it, so ``describe`` can reprint both.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import (ConfigurationError, IncompatibilityError,
                     MissingInputError)
from .sim.push import ACTION_OFFSET, ACTION_SCALE

CONTAINER_MAGIC = b"CURIO1"
CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b"CURIOCKPT"
CHECKPOINT_VERSION = 1
TASK_KINDS = ("grasp", "push", "poke", "identity", "gallery")

_HEADER_FMT = "<6sIIQ3IQ16sI"        # magic, version, task, count, c/h/w,
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)   # seed, settings hash, n_norm
_COUNT_OFFSET = 14                   # byte offset of the count field


def settings_hash(entries: dict) -> bytes:
    """16-byte digest of a flat settings mapping, key order independent."""
    text = "".join(f"{k}={entries[k]}\n" for k in sorted(entries))
    return hashlib.sha256(text.encode()).digest()[:16]


# ---------------------------------------------------------------- container


class ContainerWriter:
    """Streams length-prefixed records after a fixed header.

    The record count is patched into the header on close, so callers can
    append lazily without knowing the total up front.
    """

    def __init__(self, path, task: str, image_shape, seed: int,
                 config_hash: bytes, norm=()):
        if task not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {task!r}")
        if len(config_hash) != 16:
            raise ConfigurationError("config hash must be 16 bytes")
        self.path = str(path)
        self.task = task
        self.image_shape = tuple(int(v) for v in image_shape)
        self.norm = np.asarray(norm, dtype="<f8")
        self._count = 0
        self._fh = open(self.path, "wb")
        c, h, w = self.image_shape
        self._fh.write(struct.pack(_HEADER_FMT, CONTAINER_MAGIC,
                                   CONTAINER_VERSION, TASK_KINDS.index(task),
                                   0, c, h, w, seed, config_hash,
                                   self.norm.size))
        self._fh.write(self.norm.tobytes())

    def append(self, meta, images) -> None:
        meta = np.ascontiguousarray(meta, dtype="<f8")
        if meta.ndim != 1:
            raise ConfigurationError("record metadata must be a flat vector")
        blocks = []
        for img in images:
            if img.shape != self.image_shape:
                raise ConfigurationError(
                    f"image shape {img.shape} != container "
                    f"shape {self.image_shape}")
            blocks.append(np.ascontiguousarray(img, dtype="<f4").tobytes())
        payload = struct.pack("<I", meta.size) + meta.tobytes()
        payload += struct.pack("<I", len(blocks)) + b"".join(blocks)
        self._fh.write(struct.pack("<Q", len(payload)))
        self._fh.write(payload)
        self._count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(struct.pack("<Q", self._count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ContainerReader:
    """Random-access view of a container; images decoded on demand."""

    def __init__(self, path):
        self.path = str(path)
        try:
            self._fh = open(self.path, "rb")
        except FileNotFoundError:
            raise MissingInputError(f"dataset not found: {self.path}")
        raw = self._fh.read(_HEADER_SIZE)
        if len(raw) < _HEADER_SIZE or raw[:6] != CONTAINER_MAGIC:
            raise IncompatibilityError(
                f"{self.path} is not a dataset container")
        (_, self.version, task_ix, self.count, c, h, w, self.seed,
         self.config_hash, n_norm) = struct.unpack(_HEADER_FMT, raw)
        if self.version != CONTAINER_VERSION:
            raise IncompatibilityError(
                f"container version {self.version} unsupported")
        self.task = TASK_KINDS[task_ix]
        self.image_shape = (c, h, w)
        self.norm = np.frombuffer(self._fh.read(8 * n_norm), dtype="<f8")
        self._offsets = self._scan_offsets()

    def _scan_offsets(self):
        pos = self._fh.tell()
        end = self._fh.seek(0, 2)
        self._fh.seek(pos)
        offsets = []
        for _ in range(self.count):
            offsets.append(pos)
            raw = self._fh.read(8)
            if len(raw) != 8:
                raise IncompatibilityError(
                    f"{self.path}: truncated record table")
            (rec_len,) = struct.unpack("<Q", raw)
            pos += 8 + rec_len
            if pos > end:
                raise IncompatibilityError(
                    f"{self.path}: record extends past end of file")
            self._fh.seek(pos)
        if pos != end:
            raise IncompatibilityError(
                f"{self.path}: trailing bytes after final record")
        return offsets

    def __len__(self):
        return self.count

    def read(self, i: int):
        """Record i as (meta float64 vector, list of float32 images)."""
        self._fh.seek(self._offsets[i] + 8)
        (n_meta,) = struct.unpack("<I", self._fh.read(4))
        meta = np.frombuffer(self._fh.read(8 * n_meta), dtype="<f8").copy()
        (n_img,) = struct.unpack("<I", self._fh.read(4))
        c, h, w = self.image_shape
        images = [np.frombuffer(self._fh.read(4 * c * h * w),
                                dtype="<f4").reshape(c, h, w).copy()
                  for _ in range(n_img)]
        return meta, images

    def read_meta(self, i: int) -> np.ndarray:
        """Metadata only, skipping the image payload."""
        self._fh.seek(self._offsets[i] + 8)
        (n_meta,) = struct.unpack("<I", self._fh.read(4))
        return np.frombuffer(self._fh.read(8 * n_meta), dtype="<f8").copy()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -------------------------------------------------- task-specific layouts
#
# Metadata vectors per task (camera = center_x, center_y, half_extent;
# resolution lives in the header image shape):
#   grasp    [obj_seed, pose(3), point(2), angle_bin, label, gripper_width,
#             camera(3)]                                         -> 12
#   push     [obj_seed, pose_begin(3), pose_final(3), action(5), contacted,
#             kappa, camera(3)]                                  -> 17
#   poke     [obj_seed, pose(3), point(2), stiffness, slope, intercept,
#             camera(3), n_steps, times(n), pressures(n)]        -> 13 + 2n
#   identity [seed_a, pose_a(3), seed_b, pose_b(3), same, cam_a(3),
#             cam_b(3)]                                          -> 15
#   gallery  [obj_seed, pose(3), instance_id, category_id, texture_family,
#             class_id, camera(3)]                               -> 11


def _cam(view):
    return [view.center[0], view.center[1], view.half_extent]


def write_grasp_container(path, samples, seed: int, config_hash: bytes):
    shape = samples[0].patch.shape if samples else (3, 64, 64)
    with ContainerWriter(path, "grasp", shape, seed, config_hash) as w:
        for s in samples:
            meta = [s.obj_seed, *s.pose, s.point[0], s.point[1],
                    s.angle_bin, s.label, s.gripper_width, *_cam(s.view)]
            w.append(np.array(meta), [s.patch])


def write_push_container(path, samples, seed: int, config_hash: bytes):
    shape = samples[0].img_begin.shape if samples else (3, 64, 64)
    norm = np.concatenate([ACTION_OFFSET, ACTION_SCALE])
    kappa = samples[0].kappa if samples else 0.0
    with ContainerWriter(path, "push", shape, seed, config_hash, norm) as w:
        for s in samples:
            meta = [s.obj_seed, *s.pose_begin, *s.pose_final, *s.action,
                    float(s.contacted), s.kappa, *_cam(s.view)]
            w.append(np.array(meta), [s.img_begin, s.img_final])


def write_poke_container(path, samples, seed: int, config_hash: bytes):
    shape = samples[0].img.shape if samples else (3, 64, 64)
    with ContainerWriter(path, "poke", shape, seed, config_hash) as w:
        for s in samples:
            meta = [s.obj_seed, *s.pose, s.point[0], s.point[1],
                    s.stiffness, s.target[0], s.target[1], *_cam(s.view),
                    len(s.times), *s.times, *s.pressures]
            w.append(np.array(meta), [s.img])


def write_identity_container(path, samples, seed: int, config_hash: bytes):
    shape = samples[0].img_a.shape if samples else (3, 64, 64)
    with ContainerWriter(path, "identity", shape, seed, config_hash) as w:
        for s in samples:
            meta = [s.seed_a, *s.pose_a, s.seed_b, *s.pose_b, s.same,
                    *_cam(s.view_a), *_cam(s.view_b)]
            w.append(np.array(meta), [s.img_a, s.img_b])


def write_gallery_container(path, samples, seed: int, config_hash: bytes):
    shape = samples[0].img.shape if samples else (3, 64, 64)
    with ContainerWriter(path, "gallery", shape, seed, config_hash) as w:
        for s in samples:
            meta = [s.obj_seed, *s.pose, s.instance_id, s.category_id,
                    s.texture_family, s.class_id, *_cam(s.view)]
            w.append(np.array(meta), [s.img])


def load_batch(reader: ContainerReader, indices) -> dict:
    """Decode records into stacked training arrays for the reader's task.

    Push targets come back normalized by the container's stored offset and
    scale so the regression sits in a friendly range.
    """
    recs = [reader.read(int(i)) for i in indices]
    task = reader.task
    if task == "grasp":
        return {"images": np.stack([r[1][0] for r in recs]),
                "bins": np.array([int(r[0][6]) for r in recs]),
                "labels": np.array([int(r[0][7]) for r in recs])}
    if task == "push":
        offset, scale = reader.norm[:5], reader.norm[5:10]
        raw = np.stack([r[0][7:12] for r in recs])
        return {"img_begin": np.stack([r[1][0] for r in recs]),
                "img_final": np.stack([r[1][1] for r in recs]),
                "targets": ((raw - offset) / scale).astype(np.float32)}
    if task == "poke":
        return {"images": np.stack([r[1][0] for r in recs]),
                "targets": np.stack([r[0][7:9] for r in recs])
                .astype(np.float32)}
    if task == "identity":
        return {"img_a": np.stack([r[1][0] for r in recs]),
                "img_b": np.stack([r[1][1] for r in recs]),
                "same": np.array([int(r[0][8]) for r in recs])}
    if task == "gallery":
        return {"images": np.stack([r[1][0] for r in recs]),
                "instance_ids": np.array([int(r[0][4]) for r in recs]),
                "category_ids": np.array([int(r[0][5]) for r in recs]),
                "class_ids": np.array([int(r[0][7]) for r in recs])}
    raise ConfigurationError(f"unknown task kind {task!r}")


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    config_hash: bytes
    stage: str
    seed: int
    arrays: dict
    opt_arrays: dict | None = None
    opt_steps: int = 0


def _write_entries(fh, arrays: dict):
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode()
        fh.write(struct.pack("<I", len(nb)) + nb)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_entries(fh) -> dict:
    (n,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode()
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(fh.read(4 * size),
                                  dtype="<f4").reshape(shape).copy()
    return out


def save_checkpoint(path, arrays: dict, stage: str, seed: int,
                    config_hash: bytes, opt_arrays=None, opt_steps=0):
    if len(config_hash) != 16:
        raise ConfigurationError("config hash must be 16 bytes")
    names = list(arrays)
    if len(set(names)) != len(names):
        raise ConfigurationError("duplicate parameter names")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(config_hash)
        sb = stage.encode()
        fh.write(struct.pack("<I", len(sb)) + sb)
        fh.write(struct.pack("<Q", seed))
        _write_entries(fh, arrays)
        if opt_arrays is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_steps))
            _write_entries(fh, opt_arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise MissingInputError(f"checkpoint not found: {path}")
    with fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise IncompatibilityError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise IncompatibilityError(
                f"checkpoint version {version} unsupported")
        config_hash = fh.read(16)
        (stage_len,) = struct.unpack("<I", fh.read(4))
        stage = fh.read(stage_len).decode()
        (seed,) = struct.unpack("<Q", fh.read(8))
        arrays = _read_entries(fh)
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt_arrays, opt_steps = None, 0
        if has_opt:
            (opt_steps,) = struct.unpack("<Q", fh.read(8))
            opt_arrays = _read_entries(fh)
    return Checkpoint(config_hash, stage, seed, arrays, opt_arrays,
                      opt_steps)


# --------------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Flat, validated settings for a train/eval run.

    Serialized as commented ``key = value`` lines; parsing rejects
    unknown keys so stale configs fail loudly.
    """

    preset: str = "desk"               # desk | paper-shape-only
    input_size: int = 64
    seed: int = 0
    grasp_data: str = ""
    push_data: str = ""
    poke_data: str = ""
    identity_data: str = ""
    gallery_data: str = ""
    out_dir: str = "runs/latest"
    batch_size: int = 16
    stage1_iters: int = 500
    stage2_cycles: int = 500
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    cosine_margin: float = 0.5
    exclude: str = "none"              # none | grasp | push | poke | identity
    eval_tap: str = "fc7"              # conv5 | fc7
    knn_k: int = 5
    recall_ks: str = "1,5,10,20"
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3

    def __post_init__(self):
        if self.preset not in ("desk", "paper-shape-only"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.exclude not in ("none",) + tuple(TASK_KINDS[:4]):
            raise ConfigurationError(f"unknown exclude {self.exclude!r}")
        if self.eval_tap not in ("conv5", "fc7"):
            raise ConfigurationError(f"unknown eval tap {self.eval_tap!r}")
        if self.batch_size < 1 or self.knn_k < 1:
            raise ConfigurationError("batch_size and knn_k must be >= 1")
        if self.input_size < 16:
            raise ConfigurationError("input_size must be at least 16")
        for name in ("stage1_iters", "stage2_cycles", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if not (0.0 <= self.rho < 1.0):
            raise ConfigurationError("rho must lie in [0, 1)")
        try:
            ks = [int(k) for k in str(self.recall_ks).split(",")]
        except ValueError:
            raise ConfigurationError(f"bad recall_ks {self.recall_ks!r}")
        if not ks or any(k < 1 for k in ks):
            raise ConfigurationError("recall_ks must be positive integers")

    def recall_k_list(self):
        return [int(k) for k in str(self.recall_ks).split(",")]

    def tasks(self):
        return tuple(t for t in TASK_KINDS[:4] if t != self.exclude)

    def data_path(self, task: str) -> str:
        return getattr(self, f"{task}_data")

    def to_text(self) -> str:
        lines = ["# training/eval run settings"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> bytes:
        """Digest of every field except ``out_dir``: where artifacts land
        has no bearing on what the run computes, so runs that differ only
        in destination share a hash (and can be compared byte for byte)."""
        return settings_hash({f.name: getattr(self, f.name)
                              for f in fields(self) if f.name != "out_dir"})


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"config line {lineno}: expected 'key = value', "
                f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ConfigurationError(f"config line {lineno}: "
                                     f"unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"config line {lineno}: "
                                     f"duplicate key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            values[key] = int(value) if kind == "int" else \
                float(value) if kind == "float" else value
        except ValueError:
            raise ConfigurationError(
                f"config line {lineno}: cannot parse {value!r} as {kind}")
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError:
        raise MissingInputError(f"config not found: {path}")


def describe_artifact(path) -> str:
    """Human-readable summary of any container or checkpoint."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(9)
    except FileNotFoundError:
        raise MissingInputError(f"no such artifact: {path}")
    if magic[:6] == CONTAINER_MAGIC:
        with ContainerReader(path) as r:
            lines = [f"dataset container: {path}",
                     f"  task          {r.task}",
                     f"  records       {r.count}",
                     f"  image shape   {r.image_shape}",
                     f"  seed          {r.seed}",
                     f"  config hash   {r.config_hash.hex()}"]
            if r.norm.size:
                lines.append(f"  norm consts   {np.array2string(r.norm)}")
        return "\n".join(lines)
    if magic == CHECKPOINT_MAGIC:
        ck = load_checkpoint(path)
        total = sum(int(np.prod(a.shape)) for a in ck.arrays.values())
        lines = [f"checkpoint: {path}",
                 f"  stage         {ck.stage}",
                 f"  seed          {ck.seed}",
                 f"  config hash   {ck.config_hash.hex()}",
                 f"  tensors       {len(ck.arrays)} ({total} parameters)",
                 f"  optimizer     "
                 f"{'present' if ck.opt_arrays is not None else 'absent'}"]
        return "\n".join(lines)
    raise IncompatibilityError(f"{path}: unrecognized artifact format")
