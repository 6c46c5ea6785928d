"""Bit-exact encoders and decoders between raw modality values and tokens.

The unified vocabulary packs four modalities into integer ids:

* text subwords occupy ``[0, 32000)`` (byte-level default tokenizer),
* discrete values map identically into ``[0, 1024)``,
* continuous values are mu-law companded, clipped to ``[-1, 1]``,
  quantized into 1024 uniform bins and shifted to ``[32000, 33024)``,
* ``33024`` is the observation/action separator.

Images never become token ids; they are cut into non-overlapping 16x16
patches in raster order and embedded downstream.

Every operation here is a deterministic pure function.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

TEXT_VOCAB = 32000
DISCRETE_VOCAB = 1024
CONTINUOUS_BINS = 1024
CONTINUOUS_BASE = TEXT_VOCAB
CONTINUOUS_END = CONTINUOUS_BASE + CONTINUOUS_BINS
SEPARATOR_TOKEN = CONTINUOUS_END
VOCAB_SIZE = SEPARATOR_TOKEN + 1

PATCH_SIZE = 16
PATCH_SCALE = math.sqrt(PATCH_SIZE)  # pixel values divided by sqrt(16) = 4


class Modality(enum.Enum):
    TEXT = "text"
    IMAGE = "image"
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class MuLawParams:
    """Companding constants; the defaults compress ``[-256, 256]`` onto ``[-1, 1]``."""

    mu: float = 100.0
    M: float = 256.0

    def __post_init__(self):
        if not (self.mu > 0 and self.M > 0):
            raise ValueError(f"mu and M must be positive, got mu={self.mu}, M={self.M}")


DEFAULT_MU_LAW = MuLawParams()


@dataclass(frozen=True)
class TensorSchema:
    """Per-stream metadata driving encode/decode.

    ``value_range`` and ``compand`` are meaningful for continuous streams
    only. A stream that is not companded must already live in ``[-1, 1]``.
    """

    key: str
    shape: tuple[int, ...]
    modality: Modality
    value_range: tuple[float, float] | None = None
    compand: bool = False
    is_action: bool = False

    def __post_init__(self):
        if not self.key:
            raise SchemaError("schema key must be a non-empty string")
        if any(d < 1 for d in self.shape):
            raise SchemaError(f"{self.key}: shape dims must be >= 1, got {self.shape}")
        if self.modality is Modality.CONTINUOUS:
            if self.value_range is None:
                raise SchemaError(f"{self.key}: continuous stream needs a value_range")
            lo, hi = self.value_range
            if not (lo < hi):
                raise SchemaError(f"{self.key}: value_range must satisfy low < high")
            if not self.compand and (lo < -1.0 or hi > 1.0):
                raise SchemaError(
                    f"{self.key}: non-companded range {self.value_range} exceeds [-1, 1]"
                )
        else:
            if self.value_range is not None:
                raise SchemaError(f"{self.key}: value_range is continuous-only")
            if self.compand:
                raise SchemaError(f"{self.key}: compand is continuous-only")
        if self.modality is Modality.IMAGE:
            if len(self.shape) != 3:
                raise SchemaError(f"{self.key}: image shape must be (H, W, C)")
            h, w, _ = self.shape
            if h % PATCH_SIZE or w % PATCH_SIZE:
                raise SchemaError(
                    f"{self.key}: image dims {h}x{w} not divisible by {PATCH_SIZE}"
                )
        if self.is_action and self.modality in (Modality.TEXT, Modality.IMAGE):
            raise SchemaError(f"{self.key}: actions must be discrete or continuous")

    @property
    def num_elements(self) -> int:
        """Sequence elements this stream contributes per timestep."""
        if self.modality is Modality.IMAGE:
            h, w, _ = self.shape
            return (h // PATCH_SIZE) * (w // PATCH_SIZE)
        if self.modality is Modality.TEXT:
            raise SchemaError(f"{self.key}: text length is value-dependent")
        return int(np.prod(self.shape)) if self.shape else 1

    @staticmethod
    def text(key: str) -> "TensorSchema":
        return TensorSchema(key=key, shape=(), modality=Modality.TEXT)

    @staticmethod
    def image(key: str, height: int, width: int, channels: int) -> "TensorSchema":
        return TensorSchema(key=key, shape=(height, width, channels), modality=Modality.IMAGE)

    @staticmethod
    def discrete(key: str, shape: tuple[int, ...] = (), is_action: bool = False) -> "TensorSchema":
        return TensorSchema(key=key, shape=shape, modality=Modality.DISCRETE, is_action=is_action)

    @staticmethod
    def continuous(
        key: str,
        shape: tuple[int, ...],
        value_range: tuple[float, float],
        is_action: bool = False,
    ) -> "TensorSchema":
        """Companding switches on exactly when the declared range leaves [-1, 1]."""
        lo, hi = value_range
        compand = lo < -1.0 or hi > 1.0
        return TensorSchema(
            key=key,
            shape=shape,
            modality=Modality.CONTINUOUS,
            value_range=(float(lo), float(hi)),
            compand=compand,
            is_action=is_action,
        )


# ---------------------------------------------------------------------------
# mu-law companding
# ---------------------------------------------------------------------------

def mu_law_compand(x, params: MuLawParams = DEFAULT_MU_LAW):
    """sgn(x) * log(|x| * mu + 1) / log(M * mu + 1). Accepts scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("mu_law_compand: input must be finite")
    denom = np.log1p(params.M * params.mu)
    out = np.sign(arr) * np.log1p(params.mu * np.abs(arr)) / denom
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def mu_law_expand(y, params: MuLawParams = DEFAULT_MU_LAW):
    """Exact analytic inverse of :func:`mu_law_compand` on ``[-1, 1]``."""
    arr = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("mu_law_expand: input must be finite")
    if np.any(np.abs(arr) > 1.0):
        raise ValueError("mu_law_expand: input outside [-1, 1]")
    log_top = np.log1p(params.M * params.mu)
    out = np.sign(arr) * np.expm1(np.abs(arr) * log_top) / params.mu
    return float(out) if np.isscalar(y) or arr.ndim == 0 else out


# ---------------------------------------------------------------------------
# uniform binning on [-1, 1]
# ---------------------------------------------------------------------------

def bin_continuous(v: float) -> int:
    """Map ``v`` in ``[-1, 1]`` to a token id in ``[32000, 33024)``.

    Bins are half-open with the top bin closed, so v = 1.0 lands in bin 1023.
    """
    if not math.isfinite(v):
        raise ValueError("bin_continuous: input must be finite")
    if v < -1.0 or v > 1.0:
        raise ValueError(f"bin_continuous: {v} outside [-1, 1]; clip first")
    return CONTINUOUS_BASE + _bin_array(np.float64(v)).item()


def _bin_array(values: np.ndarray) -> np.ndarray:
    bins = np.floor((values + 1.0) * (CONTINUOUS_BINS / 2.0))
    return np.clip(bins, 0, CONTINUOUS_BINS - 1).astype(np.int64)


def unbin_continuous(token: int) -> float:
    """Return the bin center for a continuous token id."""
    if not (CONTINUOUS_BASE <= token < CONTINUOUS_END):
        raise ValueError(
            f"unbin_continuous: token {token} outside [{CONTINUOUS_BASE}, {CONTINUOUS_END})"
        )
    return float(_unbin_array(np.asarray(token - CONTINUOUS_BASE)))


def _unbin_array(bins: np.ndarray) -> np.ndarray:
    return (bins.astype(np.float64) + 0.5) / CONTINUOUS_BINS * 2.0 - 1.0


# ---------------------------------------------------------------------------
# continuous streams
# ---------------------------------------------------------------------------

def encode_continuous(
    values, schema: TensorSchema, params: MuLawParams = DEFAULT_MU_LAW
) -> list[int]:
    """Flatten row-major, compand when the schema says so, clip, bin."""
    if schema.modality is not Modality.CONTINUOUS:
        raise SchemaError(f"{schema.key}: encode_continuous needs a continuous schema")
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != schema.shape:
        raise SchemaError(f"{schema.key}: shape {arr.shape} != schema {schema.shape}")
    flat = arr.ravel(order="C")
    if not np.all(np.isfinite(flat)):
        raise ValueError(f"{schema.key}: non-finite continuous value")
    if schema.compand:
        flat = mu_law_compand(flat, params)
    flat = np.clip(flat, -1.0, 1.0)
    return (CONTINUOUS_BASE + _bin_array(flat)).tolist()


def decode_continuous(
    tokens, schema: TensorSchema, params: MuLawParams = DEFAULT_MU_LAW
) -> np.ndarray:
    """Inverse of :func:`encode_continuous` up to bin quantization."""
    if schema.modality is not Modality.CONTINUOUS:
        raise SchemaError(f"{schema.key}: decode_continuous needs a continuous schema")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size != schema.num_elements:
        raise SchemaError(
            f"{schema.key}: got {ids.size} tokens, schema holds {schema.num_elements}"
        )
    if np.any(ids < CONTINUOUS_BASE) or np.any(ids >= CONTINUOUS_END):
        raise ValueError(f"{schema.key}: token outside continuous range")
    values = _unbin_array(ids - CONTINUOUS_BASE)
    if schema.compand:
        values = mu_law_expand(values, params)
    return values.reshape(schema.shape)


# ---------------------------------------------------------------------------
# discrete streams
# ---------------------------------------------------------------------------

def encode_discrete(values, schema: TensorSchema) -> list[int]:
    if schema.modality is not Modality.DISCRETE:
        raise SchemaError(f"{schema.key}: encode_discrete needs a discrete schema")
    arr = np.asarray(values)
    if not np.issubdtype(arr.dtype, np.integer):
        raise SchemaError(f"{schema.key}: discrete values must be integers")
    if arr.shape != schema.shape:
        raise SchemaError(f"{schema.key}: shape {arr.shape} != schema {schema.shape}")
    flat = arr.ravel(order="C")
    if flat.size and (flat.min() < 0 or flat.max() >= DISCRETE_VOCAB):
        raise ValueError(f"{schema.key}: discrete value outside [0, {DISCRETE_VOCAB})")
    return flat.astype(np.int64).tolist()


def decode_discrete(tokens, schema: TensorSchema) -> np.ndarray:
    if schema.modality is not Modality.DISCRETE:
        raise SchemaError(f"{schema.key}: decode_discrete needs a discrete schema")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size != schema.num_elements:
        raise SchemaError(
            f"{schema.key}: got {ids.size} tokens, schema holds {schema.num_elements}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= DISCRETE_VOCAB):
        raise ValueError(f"{schema.key}: token outside [0, {DISCRETE_VOCAB})")
    return ids.reshape(schema.shape)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

class ByteTextTokenizer:
    """Reversible zero-dependency default: one token per UTF-8 byte."""

    name = "bytes"

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, tokens: list[int]) -> str:
        return bytes(tokens).decode("utf-8")


_text_tokenizer = ByteTextTokenizer()


def get_text_tokenizer():
    return _text_tokenizer


def set_text_tokenizer(tokenizer) -> None:
    """Register a replacement tokenizer; it must emit ids in [0, 32000)."""
    global _text_tokenizer
    _text_tokenizer = tokenizer


def encode_text(text: str, tokenizer=None) -> list[int]:
    tok = tokenizer if tokenizer is not None else _text_tokenizer
    ids = list(tok.encode(text))
    for t in ids:
        if not (0 <= t < TEXT_VOCAB):
            raise ValueError(
                f"text tokenizer emitted id {t} outside [0, {TEXT_VOCAB}): contract violation"
            )
    return ids


def decode_text(tokens, tokenizer=None) -> str:
    tok = tokenizer if tokenizer is not None else _text_tokenizer
    ids = list(tokens)
    for t in ids:
        if not (0 <= t < TEXT_VOCAB):
            raise ValueError(f"text token {t} outside [0, {TEXT_VOCAB})")
    return tok.decode(ids)


# ---------------------------------------------------------------------------
# image patches
# ---------------------------------------------------------------------------

@dataclass
class ImagePatch:
    """One 16x16xC patch with its normalized position inside the source image.

    ``pixels`` are normalized floats in ``[-0.25, 0.25]``; the intervals are
    the patch's pixel extents divided by image height resp. width.
    """

    pixels: np.ndarray
    row_interval: tuple[float, float]
    col_interval: tuple[float, float]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[:2] != (PATCH_SIZE, PATCH_SIZE):
            raise SchemaError(f"patch pixels must be {PATCH_SIZE}x{PATCH_SIZE}xC")
        if np.any(np.abs(self.pixels) > 0.25 + 1e-12):
            raise SchemaError("patch pixels must be normalized into [-0.25, 0.25]")
        for lo, hi in (self.row_interval, self.col_interval):
            if not (0.0 <= lo < hi <= 1.0):
                raise SchemaError(f"patch interval ({lo}, {hi}) invalid")

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def normalize_patch(raw: np.ndarray) -> np.ndarray:
    """Bytes to floats: (p / 127.5 - 1) / 4, so {0, 255} map to -/+0.25."""
    arr = np.asarray(raw)
    if arr.dtype != np.uint8:
        raise SchemaError("normalize_patch expects uint8 pixels")
    return (arr.astype(np.float64) / 127.5 - 1.0) / PATCH_SCALE


def denormalize_patch(pixels: np.ndarray) -> np.ndarray:
    """Exact byte recovery from :func:`normalize_patch` output."""
    return np.rint((np.asarray(pixels) * PATCH_SCALE + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def image_to_patches(image: np.ndarray) -> list[ImagePatch]:
    """Cut an HxWxC image into normalized 16x16 patches in raster order.

    uint8 input is normalized here; float input must already be normalized.
    Dimensions not divisible by 16 are rejected, never padded.
    """
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise SchemaError(f"image must be HxWxC, got shape {arr.shape}")
    h, w, _ = arr.shape
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise SchemaError(f"image dims {h}x{w} not divisible by {PATCH_SIZE}")
    if arr.dtype == np.uint8:
        arr = (arr.astype(np.float64) / 127.5 - 1.0) / PATCH_SCALE
    else:
        arr = arr.astype(np.float64)
        if np.any(np.abs(arr) > 0.25 + 1e-12):
            raise SchemaError("float image must be pre-normalized into [-0.25, 0.25]")
    patches = []
    for r in range(h // PATCH_SIZE):
        r0, r1 = r * PATCH_SIZE, (r + 1) * PATCH_SIZE
        for c in range(w // PATCH_SIZE):
            c0, c1 = c * PATCH_SIZE, (c + 1) * PATCH_SIZE
            patches.append(
                ImagePatch(
                    pixels=arr[r0:r1, c0:c1, :],
                    row_interval=(r0 / h, r1 / h),
                    col_interval=(c0 / w, c1 / w),
                )
            )
    return patches


def patches_to_image(patches: list[ImagePatch], height: int, width: int) -> np.ndarray:
    """Reassemble raster-ordered patches into a normalized float image."""
    if height % PATCH_SIZE or width % PATCH_SIZE:
        raise SchemaError(f"target dims {height}x{width} not divisible by {PATCH_SIZE}")
    rows, cols = height // PATCH_SIZE, width // PATCH_SIZE
    if len(patches) != rows * cols:
        raise SchemaError(f"need {rows * cols} patches, got {len(patches)}")
    channels = patches[0].channels
    out = np.empty((height, width, channels), dtype=np.float64)
    for i, patch in enumerate(patches):
        r, c = divmod(i, cols)
        out[r * PATCH_SIZE:(r + 1) * PATCH_SIZE, c * PATCH_SIZE:(c + 1) * PATCH_SIZE, :] = patch.pixels
    return out


def patches_to_bytes(patches: list[ImagePatch], height: int, width: int) -> np.ndarray:
    """Reassemble and undo normalization back to the original uint8 image."""
    return denormalize_patch(patches_to_image(patches, height, width))
