"""Versioned on-disk episode format plus the ingestion pipeline.

An episode directory holds:
  manifest.json   episode metadata (EpisodeManifest)
  records.phsd    binary frame records, little-endian:
                  magic "PHSD", u32 version=1, u32 frame_count, then per
                  frame: i64 t_ns, u8 embodiment code (0 human, 1 robot),
                  u16 instruction byte length + UTF-8 bytes, 53 f32 in
                  state-vector order (head 7, l_wrist 7, r_wrist 7,
                  l_fingers 15, r_fingers 15, l_grip, r_grip)
  images.phsi     optional image blob: magic "PHSI", u32 version=1,
                  u32 count, then 240*320*3 u8 per frame

Serialization is bit-exact: frames already store float32, so
write -> read is the identity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geom
from .geom import Se3Pose
from .retarget import RobotBinding, UnifiedFrame, gripper_from_fingers, to_unified, JointState

IMAGE_HEIGHT = 240
IMAGE_WIDTH = 320
IMAGE_CHANNELS = 3
IMAGE_BYTES = IMAGE_HEIGHT * IMAGE_WIDTH * IMAGE_CHANNELS

RECORDS_MAGIC = b"PHSD"
IMAGES_MAGIC = b"PHSI"
FORMAT_VERSION = 1

RECORDS_NAME = "records.phsd"
IMAGES_NAME = "images.phsi"
MANIFEST_NAME = "manifest.json"


class NonMonotoneTimestamps(ValueError):
    pass


class NoOverlap(ValueError):
    pass


class EmptyStream(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class SchemaError(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__(f"missing fields: {', '.join(missing)}")
        self.missing = missing


@dataclass
class ImageFrame:
    """240x320 RGB u8 frame; dimensions are enforced at ingestion."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.shape != (IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS) or p.dtype != np.uint8:
            raise ValueError(
                f"expected {IMAGE_HEIGHT}x{IMAGE_WIDTH}x{IMAGE_CHANNELS} u8 image, "
                f"got {p.shape} {p.dtype}"
            )
        self.pixels = p


@dataclass
class EpisodeManifest:
    source: str
    embodiment: str
    instruction: str
    frame_count: int
    frequency_hz: float
    records_file: str = RECORDS_NAME
    images_file: str | None = None
    normalization: str = "raw"
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.format_version != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {self.format_version}")
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")


@dataclass
class Episode:
    manifest: EpisodeManifest
    frames: list[UnifiedFrame]
    images: np.ndarray | None = None  # (n, 240, 320, 3) u8, may be a memmap


def _embodiment_code(tag: str) -> int:
    if tag == "human":
        return 0
    if tag.startswith("robot:"):
        return 1
    raise ValueError(f"unknown embodiment tag {tag!r}")


def write_episode(dirpath, manifest: EpisodeManifest, frames: list[UnifiedFrame],
                  images: np.ndarray | None = None) -> Path:
    """Write one episode directory; returns the manifest path.

    Frames must be strictly increasing in t_ns, share the manifest's
    embodiment, and carry materialized gripper values (ingestion fills
    missing ones from the thumb-index distance).
    """
    if not frames:
        raise EmptyDataset("episode needs at least one frame")
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)

    last = None
    chunks = [RECORDS_MAGIC, struct.pack("<II", FORMAT_VERSION, len(frames))]
    for i, fr in enumerate(frames):
        if last is not None and fr.t_ns <= last:
            raise NonMonotoneTimestamps(f"frame {i}: t_ns {fr.t_ns} <= previous {last}")
        last = fr.t_ns
        if fr.embodiment != manifest.embodiment:
            raise ValueError(
                f"frame {i} embodiment {fr.embodiment!r} != manifest {manifest.embodiment!r}"
            )
        if fr.l_grip is None or fr.r_grip is None:
            raise ValueError(f"frame {i}: gripper values must be materialized before writing")
        ins = fr.instruction.encode("utf-8")
        if len(ins) > 0xFFFF:
            raise ValueError(f"frame {i}: instruction longer than 65535 bytes")
        chunks.append(struct.pack("<qBH", fr.t_ns, _embodiment_code(fr.embodiment), len(ins)))
        chunks.append(ins)
        chunks.append(fr.state_vector().astype("<f4").tobytes())

    manifest.frame_count = len(frames)
    manifest.records_file = RECORDS_NAME
    (dirpath / RECORDS_NAME).write_bytes(b"".join(chunks))

    if images is not None:
        images = np.ascontiguousarray(images, dtype=np.uint8)
        if images.shape != (len(frames), IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS):
            raise ValueError(f"images shape {images.shape} does not match {len(frames)} frames")
        with open(dirpath / IMAGES_NAME, "wb") as f:
            f.write(IMAGES_MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, len(frames)))
            f.write(images.tobytes())
        manifest.images_file = IMAGES_NAME
    else:
        manifest.images_file = None

    mpath = dirpath / MANIFEST_NAME
    mpath.write_text(json.dumps(asdict(manifest), sort_keys=True, indent=1) + "\n")
    return mpath


def read_episode(path, load_images: bool = True) -> Episode:
    """Read an episode directory (or its manifest path); inverts write_episode.

    Images come back as a read-only memmap so large datasets stream from
    disk instead of loading eagerly.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = EpisodeManifest(**json.loads(path.read_text()))
    dirpath = path.parent

    blob = (dirpath / manifest.records_file).read_bytes()
    if blob[:4] != RECORDS_MAGIC:
        raise ValueError(f"{manifest.records_file}: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported records version {version}")
    off = 12
    frames: list[UnifiedFrame] = []
    for _ in range(count):
        t_ns, code, ilen = struct.unpack_from("<qBH", blob, off)
        off += 11
        instruction = blob[off : off + ilen].decode("utf-8")
        off += ilen
        vec = np.frombuffer(blob, dtype="<f4", count=53, offset=off)
        off += 53 * 4
        frames.append(
            UnifiedFrame(
                t_ns=t_ns,
                embodiment="human" if code == 0 else manifest.embodiment,
                instruction=instruction,
                head=vec[0:7],
                l_wrist=vec[7:14],
                r_wrist=vec[14:21],
                l_fingers=vec[21:36].reshape(5, 3),
                r_fingers=vec[36:51].reshape(5, 3),
                l_grip=float(vec[51]),
                r_grip=float(vec[52]),
            )
        )

    images = None
    if manifest.images_file is not None and load_images:
        ipath = dirpath / manifest.images_file
        with open(ipath, "rb") as f:
            if f.read(4) != IMAGES_MAGIC:
                raise ValueError(f"{manifest.images_file}: bad magic")
            iversion, icount = struct.unpack("<II", f.read(8))
        if iversion != FORMAT_VERSION:
            raise ValueError(f"unsupported image blob version {iversion}")
        if icount != count:
            raise ValueError(f"image count {icount} != frame count {count}")
        images = np.memmap(
            ipath, dtype=np.uint8, mode="r", offset=12,
            shape=(count, IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS),
        )
    return Episode(manifest=manifest, frames=frames, images=images)


def list_episode_dirs(root) -> list[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.glob(f"*/{MANIFEST_NAME}"))


# ---------------------------------------------------------------------------
# timestamp synchronization

POSE_CHANNELS = ("head", "l_wrist", "r_wrist")
FINGER_CHANNELS = ("l_fingers", "r_fingers")
GRIP_CHANNELS = ("l_grip", "r_grip")
REQUIRED_CHANNELS = POSE_CHANNELS + FINGER_CHANNELS


def synchronize(streams: dict, target_hz: float, embodiment: str,
                instruction: str) -> list[UnifiedFrame]:
    """Resample named timestamped channels onto a shared periodic grid.

    `streams` maps channel names (head, l_wrist, r_wrist, l_fingers,
    r_fingers, optionally l_grip/r_grip) to (t_ns array, values array)
    pairs. Output timestamps are t0 + k * period with integer
    period = round(1e9 / target_hz), covering exactly the overlap window
    (no extrapolation). Poses interpolate as slerp + lerp between the
    bracketing samples, fingertips and grips linearly. Missing grip
    channels are materialized from the synchronized fingertips.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    missing = [c for c in REQUIRED_CHANNELS if c not in streams]
    if missing:
        raise SchemaError(missing)

    times = {}
    values = {}
    for name, (t, v) in streams.items():
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if t.size == 0:
            raise EmptyStream(name)
        if np.any(np.diff(t) <= 0):
            raise NonMonotoneTimestamps(name)
        times[name] = t
        values[name] = np.asarray(v, dtype=np.float64)
        if values[name].shape[0] != t.size:
            raise ValueError(f"{name}: {t.size} timestamps vs {values[name].shape[0]} values")

    t_start = max(int(t[0]) for t in times.values())
    t_end = min(int(t[-1]) for t in times.values())
    if t_start > t_end:
        raise NoOverlap(f"window [{t_start}, {t_end}] is empty")

    period = int(round(1e9 / target_hz))
    count = (t_end - t_start) // period + 1
    grid = t_start + period * np.arange(count, dtype=np.int64)

    out = {}
    for name in streams:
        t, v = times[name], values[name]
        idx = np.searchsorted(t, grid, side="right") - 1
        idx = np.clip(idx, 0, t.size - 1)
        nxt = np.minimum(idx + 1, t.size - 1)
        denom = (t[nxt] - t[idx]).astype(np.float64)
        denom[denom == 0] = 1.0
        u = (grid - t[idx]).astype(np.float64) / denom
        if name in POSE_CHANNELS:
            out[name] = _interp_poses(v[idx], v[nxt], u)
        else:
            shape = (count,) + (1,) * (v.ndim - 1)
            w = u.reshape(shape)
            out[name] = (1.0 - w) * v[idx] + w * v[nxt]

    frames = []
    for k in range(count):
        lf = out["l_fingers"][k]
        rf = out["r_fingers"][k]
        lg = out["l_grip"][k] if "l_grip" in out else gripper_from_fingers(lf)
        rg = out["r_grip"][k] if "r_grip" in out else gripper_from_fingers(rf)
        frames.append(
            UnifiedFrame(
                t_ns=int(grid[k]), embodiment=embodiment, instruction=instruction,
                head=out["head"][k], l_wrist=out["l_wrist"][k], r_wrist=out["r_wrist"][k],
                l_fingers=lf, r_fingers=rf, l_grip=float(lg), r_grip=float(rg),
            )
        )
    return frames


def _interp_poses(a: np.ndarray, b: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Slerp the quaternion part, lerp the translation part, rowwise."""
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i, :4] = _slerp(a[i, :4], b[i, :4], float(u[i]))
        out[i, 4:] = (1.0 - u[i]) * a[i, 4:] + u[i] * b[i, 4:]
    return out


def _slerp(qa: np.ndarray, qb: np.ndarray, u: float) -> np.ndarray:
    qa = qa / np.linalg.norm(qa)
    qb = qb / np.linalg.norm(qb)
    dot = float(qa @ qb)
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-10:
        q = (1.0 - u) * qa + u * qb
        return q / np.linalg.norm(q)
    theta = np.arccos(min(1.0, dot))
    s = np.sin(theta)
    q = (np.sin((1.0 - u) * theta) / s) * qa + (np.sin(u * theta) / s) * qb
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# source adapters

HUMAN_CHANNEL_SHAPES = {
    "head": 7, "l_wrist": 7, "r_wrist": 7,
    "l_fingers": 15, "r_fingers": 15, "l_grip": 1, "r_grip": 1,
}


@dataclass
class SourceAdapter:
    """Schema mapping from a raw capture file into the unified space.

    field_map maps unified channel names to the raw file's channel names;
    scale gives per-channel unit conversion factors (e.g. 1e-3 for mm).
    Robot adapters route joint samples through retarget.to_unified using
    `binding` instead of mapping channels.
    """

    name: str
    kind: str  # "human" | "robot"
    field_map: dict | None = None
    scale: dict | None = None
    target_hz: float | None = None
    binding: RobotBinding | None = None

    def __post_init__(self):
        if self.kind not in ("human", "robot"):
            raise ValueError(f"adapter kind must be human or robot, got {self.kind!r}")
        if self.kind == "human" and self.field_map is None:
            raise SchemaError(["field_map"])
        if self.kind == "robot" and self.binding is None:
            raise SchemaError(["binding"])


def ingest(adapter: SourceAdapter, raw_paths) -> list[Episode]:
    """Convert raw capture files into unified episodes (in memory)."""
    episodes = []
    for raw_path in raw_paths:
        doc = json.loads(Path(raw_path).read_text())
        if adapter.kind == "human":
            episodes.append(_ingest_human(adapter, doc))
        else:
            episodes.append(_ingest_robot(adapter, doc))
    return episodes


def _ingest_human(adapter: SourceAdapter, doc: dict) -> Episode:
    for key in ("embodiment", "instruction", "channels"):
        if key not in doc:
            raise SchemaError([key])
    raw_channels = doc["channels"]
    scale = adapter.scale or {}

    streams = {}
    missing = []
    for unified, raw_name in adapter.field_map.items():
        if unified not in HUMAN_CHANNEL_SHAPES:
            raise ValueError(f"unknown unified channel {unified!r}")
        if raw_name not in raw_channels:
            missing.append(raw_name)
            continue
        ch = raw_channels[raw_name]
        t = np.asarray(ch["t_ns"], dtype=np.int64)
        v = np.asarray(ch["values"], dtype=np.float64)
        v = v.reshape(t.size, -1)
        if v.shape[1] != HUMAN_CHANNEL_SHAPES[unified]:
            raise ValueError(f"{raw_name}: expected width {HUMAN_CHANNEL_SHAPES[unified]}")
        s = float(scale.get(unified, 1.0))
        if s != 1.0:
            if unified in POSE_CHANNELS:
                v = v.copy()
                v[:, 4:] *= s  # scale translation only, never the quaternion
            else:
                v = v * s
        if unified in FINGER_CHANNELS:
            v = v.reshape(t.size, 5, 3)
        elif unified in GRIP_CHANNELS:
            v = v.reshape(t.size)
        streams[unified] = (t, v)
    req_missing = [adapter.field_map[c] for c in REQUIRED_CHANNELS
                   if c in adapter.field_map and adapter.field_map[c] in missing]
    not_mapped = [c for c in REQUIRED_CHANNELS if c not in adapter.field_map]
    if req_missing or not_mapped:
        raise SchemaError(req_missing + not_mapped)

    hz = adapter.target_hz if adapter.target_hz is not None else _native_hz(streams)
    frames = synchronize(streams, hz, doc["embodiment"], doc["instruction"])
    manifest = EpisodeManifest(
        source=adapter.name, embodiment=doc["embodiment"], instruction=doc["instruction"],
        frame_count=len(frames), frequency_hz=hz,
    )
    return Episode(manifest=manifest, frames=frames)


def _native_hz(streams: dict) -> float:
    t = next(iter(streams.values()))[0]
    if t.size < 2:
        return 1.0
    return 1e9 / float(np.median(np.diff(t)))


def _ingest_robot(adapter: SourceAdapter, doc: dict) -> Episode:
    for key in ("embodiment", "instruction", "samples"):
        if key not in doc:
            raise SchemaError([key])
    binding = adapter.binding
    frames = []
    for i, sample in enumerate(doc["samples"]):
        missing = [k for k in ("t_ns", "head", "l_arm", "r_arm", "l_hand", "r_hand")
                   if k not in sample]
        if missing:
            raise SchemaError([f"samples[{i}].{k}" for k in missing])
        head = np.asarray(sample["head"], dtype=np.float64)
        joints = JointState(
            np.asarray(sample["l_arm"], dtype=np.float64),
            np.asarray(sample["r_arm"], dtype=np.float64),
            np.asarray(sample["l_hand"], dtype=np.float64),
            np.asarray(sample["r_hand"], dtype=np.float64),
        )
        frames.append(
            to_unified(binding, joints, Se3Pose(head[:4], head[4:]),
                       int(sample["t_ns"]), doc["instruction"])
        )
    if not frames:
        raise EmptyDataset("robot capture has no samples")
    hz = adapter.target_hz or _hz_from_times([f.t_ns for f in frames])
    manifest = EpisodeManifest(
        source=adapter.name, embodiment=frames[0].embodiment, instruction=doc["instruction"],
        frame_count=len(frames), frequency_hz=hz,
    )
    return Episode(manifest=manifest, frames=frames)


def _hz_from_times(t: list[int]) -> float:
    if len(t) < 2:
        return 1.0
    return 1e9 / float(np.median(np.diff(np.asarray(t, dtype=np.int64))))


# ---------------------------------------------------------------------------
# synthetic two-domain fixture

ROBOT_WRIST_Z_OFFSET = 0.05
ROBOT_IMAGE_OFFSET = 40
HUMAN_BACKGROUND = 90

FIXTURE_INSTRUCTIONS = (
    "reach the red block",
    "reach the green block",
    "reach the blue block",
)

_REST_FINGERS = np.array(
    [
        [0.06, 0.05, -0.02],
        [0.15, 0.03, 0.0],
        [0.16, 0.01, 0.0],
        [0.15, -0.01, 0.0],
        [0.13, -0.03, 0.0],
    ]
)
_CURL_FINGERS = np.array(
    [
        [0.08, 0.02, -0.04],
        [0.11, 0.03, -0.07],
        [0.12, 0.01, -0.08],
        [0.11, -0.01, -0.07],
        [0.10, -0.03, -0.06],
    ]
)


def gen_fixture(out_dir, domain: str, n_episodes: int, seed: int,
                frames_per_episode: int = 24, hz: float = 15.0,
                with_images: bool = True) -> list[Path]:
    """Generate scripted reach episodes for one domain.

    Domains share task structure and differ only by a visual cue (robot
    background is +40 u8 brighter) and a proprioceptive bias (robot wrist
    z is +0.05 m). Deterministic: identical (domain, n, seed) arguments
    produce bit-identical files.
    """
    if domain not in ("human", "robot"):
        raise ValueError("domain must be 'human' or 'robot'")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    out_dir = Path(out_dir)
    embodiment = "human" if domain == "human" else "robot:fixture"
    z_off = 0.0 if domain == "human" else ROBOT_WRIST_Z_OFFSET
    background = HUMAN_BACKGROUND + (0 if domain == "human" else ROBOT_IMAGE_OFFSET)

    paths = []
    period = int(round(1e9 / hz))
    for ep in range(n_episodes):
        # domain is not part of the key: both domains share trajectories and
        # noise, differing only by the documented offsets
        rng = np.random.default_rng([seed, ep])
        instruction = FIXTURE_INSTRUCTIONS[ep % len(FIXTURE_INSTRUCTIONS)]
        target = rng.uniform([0.25, -0.15, -0.25], [0.45, 0.15, 0.05])
        start_l = np.array([0.15, 0.20, -0.30])
        start_r = np.array([0.15, -0.20, -0.30])
        head_t = np.array([0.0, 0.0, 0.6])

        frames = []
        images = np.empty((frames_per_episode, IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS),
                          dtype=np.uint8) if with_images else None
        for k in range(frames_per_episode):
            tau = k / max(1, frames_per_episode - 1)
            s = 10 * tau**3 - 15 * tau**4 + 6 * tau**5  # min-jerk profile
            wl = (1 - s) * start_l + s * target
            wr = (1 - s) * start_r + s * (target * np.array([1.0, -1.0, 1.0]))
            wl = wl + [0.0, 0.0, z_off]
            wr = wr + [0.0, 0.0, z_off]
            quat = geom.quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.4 * s - 0.2)
            fingers = (1 - s) * _REST_FINGERS + s * _CURL_FINGERS
            frames.append(
                UnifiedFrame(
                    t_ns=k * period, embodiment=embodiment, instruction=instruction,
                    head=np.concatenate([[1.0, 0.0, 0.0, 0.0], head_t]),
                    l_wrist=np.concatenate([quat, wl]),
                    r_wrist=np.concatenate([quat, wr]),
                    l_fingers=fingers, r_fingers=fingers,
                    l_grip=gripper_from_fingers(fingers),
                    r_grip=gripper_from_fingers(fingers),
                )
            )
            if with_images:
                img = rng.integers(-10, 11, size=(IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS),
                                   dtype=np.int16) + background
                np.clip(img, 0, 255, out=img)
                row = int((target[1] + 0.2) / 0.4 * (IMAGE_HEIGHT - 40)) + 8
                col = int((target[0] - 0.2) / 0.3 * (IMAGE_WIDTH - 40)) + 8
                r0 = min(max(row, 0), IMAGE_HEIGHT - 24)
                c0 = min(max(col, 0), IMAGE_WIDTH - 24)
                img[r0 : r0 + 24, c0 : c0 + 24, :] = 220
                images[k] = img.astype(np.uint8)

        manifest = EpisodeManifest(
            source=f"fixture-{domain}", embodiment=embodiment, instruction=instruction,
            frame_count=frames_per_episode, frequency_hz=hz,
        )
        paths.append(write_episode(out_dir / f"{domain}_{ep:04d}", manifest, frames, images))
    return paths


def export_raw_capture(episode: Episode, path) -> Path:
    """Dump an episode back out as a raw human-capture JSON document.

    This is the repo's own fixture schema: the identity adapter over it
    reproduces the episode exactly.
    """
    frames = episode.frames
    t = [f.t_ns for f in frames]
    doc = {
        "source": episode.manifest.source,
        "embodiment": episode.manifest.embodiment,
        "instruction": episode.manifest.instruction,
        "channels": {
            "head": {"t_ns": t, "values": [f.head.tolist() for f in frames]},
            "left_wrist": {"t_ns": t, "values": [f.l_wrist.tolist() for f in frames]},
            "right_wrist": {"t_ns": t, "values": [f.r_wrist.tolist() for f in frames]},
            "left_fingers": {"t_ns": t, "values": [f.l_fingers.reshape(-1).tolist() for f in frames]},
            "right_fingers": {"t_ns": t, "values": [f.r_fingers.reshape(-1).tolist() for f in frames]},
            "left_grip": {"t_ns": t, "values": [[f.l_grip] for f in frames]},
            "right_grip": {"t_ns": t, "values": [[f.r_grip] for f in frames]},
        },
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


IDENTITY_FIELD_MAP = {
    "head": "head",
    "l_wrist": "left_wrist",
    "r_wrist": "right_wrist",
    "l_fingers": "left_fingers",
    "r_fingers": "right_fingers",
    "l_grip": "left_grip",
    "r_grip": "right_grip",
}


# ---------------------------------------------------------------------------
# normalization statistics

STD_CLAMP = 1e-6


@dataclass
class NormStats:
    """Per-dimension mean/std over 53-dim state vectors, std clamped."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(53)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(53)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ValueError("norm stats must be finite")
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) * self.std + self.mean).astype(np.float32)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()})

    @staticmethod
    def from_json(text: str) -> "NormStats":
        doc = json.loads(text)
        return NormStats(np.array(doc["mean"]), np.array(doc["std"]))


def compute_norm_stats(episodes) -> NormStats:
    """Population mean/std over every frame's state vector (f64 sums)."""
    total = np.zeros(53)
    total_sq = np.zeros(53)
    n = 0
    for ep in episodes:
        frames = ep.frames if isinstance(ep, Episode) else ep
        for fr in frames:
            v = fr.state_vector().astype(np.float64)
            total += v
            total_sq += v * v
            n += 1
    if n == 0:
        raise EmptyDataset("no frames")
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_CLAMP)
    return NormStats(mean, std)
