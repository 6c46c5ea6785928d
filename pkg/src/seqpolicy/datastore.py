"""Episode persistence, expert-return filtering, and weighted dataset mixing.

Episodes are stored as self-describing binary records holding raw values,
never tokens; tokenization is a view over storage, so codec parameters can
change without rewriting corpora. Each record is length-prefixed and closed
by a CRC-32 of its body, giving cheap corruption detection.

Record layout (all integers little-endian)::

    magic "SQEP" | u16 version | u64 body_len | body | u32 crc32(body)

The body carries the task id, per-timestep rewards, a schema table
(length-prefixed UTF-8 keys plus shape/modality/range fields), and one
payload block per timestep referencing schema indices.
"""

from __future__ import annotations

import configparser
import glob as globlib
import io
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Modality, TensorSchema
from .errors import (
    ChecksumError,
    ExhaustedStreamError,
    SchemaError,
    TruncatedRecordError,
    VersionMismatchError,
)
from .sequencer import ElementSequence, Episode, Timestep, flatten_episode, sample_subsequence

logger = logging.getLogger(__name__)

MAGIC = b"SQEP"
FORMAT_VERSION = 1

_MODALITY_CODE = {
    Modality.TEXT: 0,
    Modality.IMAGE: 1,
    Modality.DISCRETE: 2,
    Modality.CONTINUOUS: 3,
}
_CODE_MODALITY = {v: k for k, v in _MODALITY_CODE.items()}


# ---------------------------------------------------------------------------
# binary record encode/decode
# ---------------------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def u64(self, v):
        self.buf += struct.pack("<Q", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf += raw

    def raw(self, b: bytes):
        self.buf += b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedRecordError(
                f"record body ends at byte {len(self.data)}, needed {self.pos + n}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


def _write_schema(w: _Writer, schema: TensorSchema) -> None:
    w.string(schema.key)
    w.u8(_MODALITY_CODE[schema.modality])
    w.u8(1 if schema.is_action else 0)
    w.u8(1 if schema.compand else 0)
    w.u8(len(schema.shape))
    for d in schema.shape:
        w.u32(d)
    if schema.value_range is not None:
        w.u8(1)
        w.f64(schema.value_range[0])
        w.f64(schema.value_range[1])
    else:
        w.u8(0)


def _read_schema(r: _Reader) -> TensorSchema:
    key = r.string()
    modality = _CODE_MODALITY[r.u8()]
    is_action = bool(r.u8())
    compand = bool(r.u8())
    ndim = r.u8()
    shape = tuple(r.u32() for _ in range(ndim))
    value_range = None
    if r.u8():
        value_range = (r.f64(), r.f64())
    return TensorSchema(
        key=key,
        shape=shape,
        modality=modality,
        value_range=value_range,
        compand=compand,
        is_action=is_action,
    )


def _write_value(w: _Writer, schema: TensorSchema, value) -> None:
    if schema.modality is Modality.TEXT:
        w.string(value)
        return
    arr = np.asarray(value)
    if arr.shape != schema.shape:
        raise SchemaError(f"{schema.key}: value shape {arr.shape} != {schema.shape}")
    if schema.modality is Modality.IMAGE:
        if arr.dtype != np.uint8:
            raise SchemaError(f"{schema.key}: image values stored as uint8")
        w.raw(arr.tobytes(order="C"))
    elif schema.modality is Modality.DISCRETE:
        w.raw(arr.astype("<i4").tobytes(order="C"))
    else:
        w.raw(arr.astype("<f8").tobytes(order="C"))


def _read_value(r: _Reader, schema: TensorSchema):
    if schema.modality is Modality.TEXT:
        return r.string()
    count = int(np.prod(schema.shape)) if schema.shape else 1
    if schema.modality is Modality.IMAGE:
        raw = r._take(count)
        return np.frombuffer(raw, dtype=np.uint8).reshape(schema.shape).copy()
    if schema.modality is Modality.DISCRETE:
        raw = r._take(4 * count)
        arr = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    else:
        raw = r._take(8 * count)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(schema.shape) if schema.shape else arr[0]


def encode_episode(ep: Episode) -> bytes:
    """Serialize one episode to a framed, checksummed record."""
    body = _Writer()
    body.string(ep.task_id)
    body.u32(len(ep.rewards))
    for rwd in ep.rewards:
        body.f64(float(rwd))

    schemas: list[TensorSchema] = []
    index: dict[TensorSchema, int] = {}

    def schema_idx(schema: TensorSchema) -> int:
        if schema not in index:
            index[schema] = len(schemas)
            schemas.append(schema)
        return index[schema]

    steps = []
    for ts in ep.timesteps:
        obs = [(schema_idx(schema), schema, value) for _, (schema, value) in sorted(ts.observations.items())]
        act = None
        if ts.action is not None:
            act = (schema_idx(ts.action[0]), ts.action[0], ts.action[1])
        steps.append((obs, act))

    body.u32(len(schemas))
    for schema in schemas:
        _write_schema(body, schema)
    body.u32(len(steps))
    for obs, act in steps:
        body.u32(len(obs))
        for idx, schema, value in obs:
            body.u32(idx)
            _write_value(body, schema, value)
        if act is None:
            body.u8(0)
        else:
            body.u8(1)
            body.u32(act[0])
            _write_value(body, act[1], act[2])

    payload = bytes(body.buf)
    head = _Writer()
    head.raw(MAGIC)
    head.u16(FORMAT_VERSION)
    head.u64(len(payload))
    return bytes(head.buf) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_episode(data: bytes, offset: int = 0) -> tuple[Episode, int]:
    """Parse one record starting at ``offset``; returns (episode, next offset)."""
    if offset + 14 > len(data):
        raise TruncatedRecordError("record header incomplete")
    if data[offset : offset + 4] != MAGIC:
        raise TruncatedRecordError("bad record magic")
    version = struct.unpack_from("<H", data, offset + 4)[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, supported {FORMAT_VERSION}")
    body_len = struct.unpack_from("<Q", data, offset + 6)[0]
    body_start = offset + 14
    if body_start + body_len + 4 > len(data):
        raise TruncatedRecordError(
            f"record claims {body_len} body bytes, only {len(data) - body_start - 4} present"
        )
    body = data[body_start : body_start + body_len]
    stored_crc = struct.unpack_from("<I", data, body_start + body_len)[0]
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError("record checksum mismatch")

    r = _Reader(body)
    task_id = r.string()
    n_rewards = r.u32()
    rewards = [r.f64() for _ in range(n_rewards)]
    n_schemas = r.u32()
    schemas = [_read_schema(r) for _ in range(n_schemas)]
    n_steps = r.u32()
    timesteps = []
    for _ in range(n_steps):
        n_obs = r.u32()
        observations = {}
        for _ in range(n_obs):
            schema = schemas[r.u32()]
            observations[schema.key] = (schema, _read_value(r, schema))
        action = None
        if r.u8():
            schema = schemas[r.u32()]
            action = (schema, _read_value(r, schema))
        timesteps.append(Timestep(observations=observations, action=action))
    if not r.done():
        raise TruncatedRecordError("record body has trailing bytes")
    return Episode(task_id=task_id, timesteps=timesteps, rewards=rewards), body_start + body_len + 4


def write_episode(ep: Episode, sink) -> None:
    """Append one record to a path or binary file object."""
    record = encode_episode(ep)
    if hasattr(sink, "write"):
        sink.write(record)
    else:
        with open(sink, "ab") as f:
            f.write(record)


def write_episodes(episodes: list[Episode], path) -> None:
    with open(path, "wb") as f:
        for ep in episodes:
            f.write(encode_episode(ep))


def read_episode(source) -> Episode:
    """Read exactly one record from a path, bytes, or binary file object."""
    data = _as_bytes(source)
    episode, _ = decode_episode(data)
    return episode


def read_episodes(source) -> list[Episode]:
    """Read all records concatenated in a file or byte string."""
    data = _as_bytes(source)
    episodes = []
    offset = 0
    while offset < len(data):
        episode, offset = decode_episode(data, offset)
        episodes.append(episode)
    return episodes


def _as_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_bytes()


# ---------------------------------------------------------------------------
# expert-return filtering
# ---------------------------------------------------------------------------

@dataclass
class FilterReport:
    expert_return: float
    window: int
    threshold: float
    kept: int
    dropped: int

    @property
    def total(self) -> int:
        return self.kept + self.dropped


def expert_window(n_episodes: int) -> int:
    """Window size: 10% of the data, at least 1, at most 1000 episodes."""
    return max(1, min(1000, n_episodes // 10))


def expert_return(returns: list[float]) -> tuple[float, int]:
    """Maximum windowed average return over the collected episodes."""
    values = np.asarray(returns, dtype=np.float64)
    if values.size == 0:
        raise ValueError("expert_return needs at least one episode return")
    w = expert_window(values.size)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    window_means = (csum[w:] - csum[:-w]) / w
    return float(window_means.max()), w


def filter_episodes(
    episodes: list[Episode], fraction: float = 0.8
) -> tuple[list[Episode], FilterReport]:
    """Keep episodes whose return reaches ``fraction`` of the expert return."""
    returns = [ep.total_return for ep in episodes]
    best, window = expert_return(returns)
    threshold = fraction * best
    kept = [ep for ep in episodes if ep.total_return >= threshold]
    report = FilterReport(
        expert_return=best,
        window=window,
        threshold=threshold,
        kept=len(kept),
        dropped=len(episodes) - len(kept),
    )
    return kept, report


# ---------------------------------------------------------------------------
# manifests and mixture sampling
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """One dataset entry: a name, episode files, and a mixture weight."""

    name: str
    paths: list[str]
    sample_weight: float
    task_ids: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.name:
            raise ValueError("dataset name must be non-empty")
        if not (self.sample_weight > 0):
            raise ValueError(f"{self.name}: sample_weight must be > 0, got {self.sample_weight}")


def load_manifest(path) -> list[DatasetManifest]:
    """Parse a manifest file: one section per dataset with paths and weight."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"manifest not found: {path}")
    base = Path(path).parent
    manifests = []
    for name in parser.sections():
        section = parser[name]
        unknown = set(section) - {"paths", "weight"}
        if unknown:
            raise ValueError(f"manifest [{name}]: unknown keys {sorted(unknown)}")
        patterns = section.get("paths", "").split()
        if not patterns:
            raise ValueError(f"manifest [{name}]: missing paths")
        files: list[str] = []
        for pattern in patterns:
            full = pattern if Path(pattern).is_absolute() else str(base / pattern)
            files.extend(sorted(globlib.glob(full)))
        weight = section.getfloat("weight", fallback=None)
        if weight is None:
            raise ValueError(f"manifest [{name}]: missing weight")
        manifests.append(DatasetManifest(name=name, paths=files, sample_weight=weight))
    if not manifests:
        raise ValueError(f"manifest {path} declares no datasets")
    return manifests


def write_manifest(manifests: list[DatasetManifest], path) -> None:
    parser = configparser.ConfigParser()
    for m in manifests:
        parser[m.name] = {"paths": " ".join(m.paths), "weight": repr(m.sample_weight)}
    with open(path, "w") as f:
        parser.write(f)


class LoadedDataset:
    """Episodes of one dataset plus their flattened-sequence cache."""

    def __init__(self, manifest: DatasetManifest, episodes: list[Episode] | None = None):
        self.manifest = manifest
        if episodes is None:
            episodes = []
            for p in manifest.paths:
                episodes.extend(read_episodes(p))
        self.episodes = episodes
        manifest.task_ids = {ep.task_id for ep in episodes}
        self._flat: list[ElementSequence | None] = [None] * len(episodes)
        self.by_task: dict[str, list[int]] = {}
        for i, ep in enumerate(episodes):
            self.by_task.setdefault(ep.task_id, []).append(i)

    @property
    def name(self) -> str:
        return self.manifest.name

    def flattened(self, index: int) -> ElementSequence:
        if self._flat[index] is None:
            self._flat[index] = flatten_episode(self.episodes[index], dataset=self.name)
        return self._flat[index]

    def __len__(self) -> int:
        return len(self.episodes)


class MixtureSampler:
    """Infinite stream of training windows drawn across weighted datasets.

    Every item comes from dataset ``d`` with probability proportional to its
    weight; within a dataset the episode is uniform, and the window is a
    uniform contiguous subsequence padded to ``seq_len``. Fixed seeds make
    the stream exactly reproducible.
    """

    def __init__(self, datasets: list[LoadedDataset], seq_len: int, rng: np.random.Generator):
        nonempty = []
        for ds in datasets:
            if len(ds) == 0:
                logger.warning("dataset %s is empty; dropped from the mixture", ds.name)
            else:
                nonempty.append(ds)
        if not nonempty:
            raise ExhaustedStreamError("all datasets in the mixture are empty")
        self.datasets = nonempty
        weights = np.array([ds.manifest.sample_weight for ds in nonempty], dtype=np.float64)
        self.probabilities = weights / weights.sum()
        self.seq_len = seq_len
        self.rng = rng

    def __iter__(self):
        return self

    def __next__(self) -> ElementSequence:
        return self.draw()[0]

    def draw(self) -> tuple[ElementSequence, LoadedDataset, int]:
        """One training window plus its dataset and episode index."""
        d = int(self.rng.choice(len(self.datasets), p=self.probabilities))
        ds = self.datasets[d]
        e = int(self.rng.integers(0, len(ds)))
        window = sample_subsequence(ds.flattened(e), self.seq_len, self.rng)
        return window, ds, e

    def prompt_source(self, ds: LoadedDataset, task_id: str) -> ElementSequence | None:
        """A same-task episode to prompt with, or None if the task is unknown."""
        indices = ds.by_task.get(task_id)
        if not indices:
            return None
        pick = indices[int(self.rng.integers(0, len(indices)))]
        return ds.flattened(pick)


def mixture_sampler(
    manifests: list[DatasetManifest], rng: np.random.Generator, seq_len: int
) -> MixtureSampler:
    """Load every dataset in the manifest list and return the mixed stream."""
    return MixtureSampler([LoadedDataset(m) for m in manifests], seq_len, rng)
