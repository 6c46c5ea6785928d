import numpy as np
import pytest

from seqpolicy import codec
from seqpolicy.codec import TensorSchema
from seqpolicy.sequencer import Episode, Timestep


class ScriptedRng:
    """Stand-in for numpy Generator with queued outcomes, for forcing branches."""

    def __init__(self, randoms=(), integers=()):
        self._randoms = list(randoms)
        self._integers = list(integers)

    def random(self):
        return self._randoms.pop(0)

    def integers(self, low, high=None):
        return self._integers.pop(0)


@pytest.fixture
def scripted_rng():
    return ScriptedRng


def build_layout_episode(
    T: int,
    text_len: int = 0,
    patch_grid: tuple[int, int] | None = None,
    tensor_shape: tuple[int, ...] | None = None,
    action_shape: tuple[int, ...] = (),
    seed: int = 0,
    task_id: str = "layout-task",
) -> Episode:
    """Episode with a fixed per-timestep layout (k, m, n, A) for layout tests."""
    rng = np.random.default_rng(seed)
    schemas: dict[str, TensorSchema] = {}
    if text_len:
        schemas["a_text"] = TensorSchema.text("a_text")
    if patch_grid:
        schemas["b_image"] = TensorSchema.image(
            "b_image", patch_grid[0] * 16, patch_grid[1] * 16, 3
        )
    if tensor_shape is not None:
        schemas["c_tensor"] = TensorSchema.discrete("c_tensor", tensor_shape)
    action_schema = TensorSchema.discrete("act", action_shape, is_action=True)
    timesteps = []
    for _ in range(T):
        obs = {}
        if text_len:
            obs["a_text"] = (
                schemas["a_text"],
                "".join(chr(rng.integers(97, 123)) for _ in range(text_len)),
            )
        if patch_grid:
            obs["b_image"] = (
                schemas["b_image"],
                rng.integers(0, 256, size=schemas["b_image"].shape, dtype=np.uint8),
            )
        if tensor_shape is not None:
            obs["c_tensor"] = (
                schemas["c_tensor"],
                rng.integers(0, 1024, size=tensor_shape or None, dtype=np.int64)
                if tensor_shape
                else np.int64(rng.integers(0, 1024)),
            )
        action = rng.integers(0, 1024, size=action_shape or None, dtype=np.int64)
        if not action_shape:
            action = np.int64(action)
        timesteps.append(Timestep(observations=obs, action=(action_schema, action)))
    return Episode(task_id=task_id, timesteps=timesteps, rewards=[0.0] * T)


@pytest.fixture
def layout_episode_factory():
    return build_layout_episode


def manual_sequence(spec, seed=0, task_id="manual", dataset=None):
    """Build an ElementSequence from terse element descriptors.

    spec: list of tuples, one per element:
      ("text", token) ("tensor", token) ("action", token) ("sep",)
      ("patch", (row_lo, row_hi), (col_lo, col_hi)) ("pad",) ("ts",)
    ("ts",) advances the timestep counter. Observation ordinals restart per
    timestep. Patches get random normalized pixels from ``seed``.
    """
    from seqpolicy import sequencer as sq

    rng = np.random.default_rng(seed)
    sources, tokens, local, mask, targets, ts_ids = [], [], [], [], [], []
    patches = {}
    t, ordinal = 0, 0
    for entry in spec:
        kind = entry[0]
        if kind == "ts":
            t += 1
            ordinal = 0
            continue
        if kind == "pad":
            sources.append(int(sq.ElementSource.PAD))
            tokens.append(sq.TOKEN_NONE)
            local.append(sq.LOCAL_NONE)
            mask.append(0)
            targets.append(sq.TARGET_NONE)
            ts_ids.append(sq.TIMESTEP_PAD)
            continue
        if kind == "patch":
            src = sq.ElementSource.PATCH
            patches[len(sources)] = codec.ImagePatch(
                pixels=rng.uniform(-0.25, 0.25, size=(16, 16, 3)),
                row_interval=entry[1],
                col_interval=entry[2],
            )
            tok = sq.TOKEN_NONE
        else:
            src = {
                "text": sq.ElementSource.TEXT,
                "tensor": sq.ElementSource.TENSOR,
                "action": sq.ElementSource.ACTION,
                "sep": sq.ElementSource.SEPARATOR,
            }[kind]
            tok = codec.SEPARATOR_TOKEN if kind == "sep" else int(entry[1])
        sources.append(int(src))
        tokens.append(tok)
        if src in (sq.ElementSource.TEXT, sq.ElementSource.PATCH, sq.ElementSource.TENSOR):
            local.append(ordinal)
            ordinal += 1
        else:
            local.append(sq.LOCAL_NONE)
        mask.append(sq.mask_bit(src))
        el = sq.SequenceElement(src, token=None if tok == sq.TOKEN_NONE else tok,
                                patch=patches.get(len(sources) - 1))
        targets.append(sq.target_of(el))
        ts_ids.append(t)
    return sq.ElementSequence(
        sources=np.array(sources, np.uint8),
        tokens=np.array(tokens, np.int32),
        local_pos=np.array(local, np.int32),
        mask=np.array(mask, np.uint8),
        targets=np.array(targets, np.int32),
        timestep=np.array(ts_ids, np.int32),
        patches=patches,
        task_id=task_id,
        dataset=dataset,
    )
