import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqpolicy import codec, sequencer
from seqpolicy.codec import SEPARATOR_TOKEN, TensorSchema
from seqpolicy.errors import SchemaError
from seqpolicy.sequencer import (
    ElementSource,
    Episode,
    Timestep,
    apply_prompt,
    assemble_batch,
    episode_layout,
    flatten_episode,
    flatten_timestep,
    order_observation,
    sample_subsequence,
)

from conftest import build_layout_episode


def _discrete_obs(key, values):
    arr = np.asarray(values, dtype=np.int64)
    return key, (TensorSchema.discrete(key, arr.shape), arr)


class TestOrderObservation:
    def test_lexicographic_keys(self):
        obs = dict([_discrete_obs("b", [2, 3]), _discrete_obs("a", [1])])
        tokens = [e.token for e in order_observation(obs)]
        assert tokens == [1, 2, 3]

    def test_modality_groups(self):
        obs = {
            "txt": (TensorSchema.text("txt"), "A"),
            "img": (
                TensorSchema.image("img", 16, 16, 1),
                np.zeros((16, 16, 1), dtype=np.uint8),
            ),
            "vec": (
                TensorSchema.continuous("vec", (2,), (-1.0, 1.0)),
                np.zeros(2),
            ),
        }
        elems = order_observation(obs)
        assert [e.source for e in elems] == [
            ElementSource.TEXT,
            ElementSource.PATCH,
            ElementSource.TENSOR,
            ElementSource.TENSOR,
        ]
        assert elems[0].token == 65

    def test_empty(self):
        assert order_observation({}) == []

    def test_insertion_order_irrelevant(self):
        pairs = [_discrete_obs("x", [5]), _discrete_obs("m", [6]), _discrete_obs("a", [7])]
        forward = order_observation(dict(pairs))
        backward = order_observation(dict(reversed(pairs)))
        assert [e.token for e in forward] == [e.token for e in backward] == [7, 6, 5]


class TestFlattenTimestep:
    def _timestep(self, terminal=False):
        obs = dict([_discrete_obs("obs", [1, 2, 3])])
        action = None
        if not terminal:
            schema = TensorSchema.discrete("act", (2,), is_action=True)
            action = (schema, np.array([9, 8]))
        return Timestep(observations=obs, action=action)

    def test_separator_position(self):
        elems = flatten_timestep(self._timestep())
        assert len(elems) == 6
        assert elems[3].source is ElementSource.SEPARATOR
        assert elems[3].token == SEPARATOR_TOKEN

    def test_terminal(self):
        elems = flatten_timestep(self._timestep(terminal=True))
        assert [e.source for e in elems[-1:]] == [ElementSource.SEPARATOR]
        assert len(elems) == 4

    def test_mask_bits(self):
        elems = flatten_timestep(self._timestep())
        assert [sequencer.mask_bit(e.source) for e in elems] == [0, 0, 0, 0, 1, 1]


class TestFlattenEpisode:
    def test_layout_formula(self):
        # T=3, k=2, m=4, n=3, A=2 -> 3 * (2 + 4 + 3 + 1 + 2) = 36
        ep = build_layout_episode(
            T=3, text_len=2, patch_grid=(2, 2), tensor_shape=(3,), action_shape=(2,)
        )
        seq = flatten_episode(ep)
        layout = episode_layout(ep)
        assert (layout.k, layout.m, layout.n, layout.A, layout.T) == (2, 4, 3, 2, 3)
        assert len(seq) == layout.total == 36

    def test_single_timestep_matches_flatten_timestep(self):
        ep = build_layout_episode(T=1, tensor_shape=(2,), action_shape=(1,))
        seq = flatten_episode(ep)
        direct = flatten_timestep(ep.timesteps[0])
        assert [e.source for e in seq.elements] == [e.source for e in direct]
        assert [e.token for e in seq.elements] == [e.token for e in direct]

    def test_mask_count(self):
        ep = build_layout_episode(T=4, text_len=3, tensor_shape=(2,), action_shape=(2,))
        seq = flatten_episode(ep)
        assert int(seq.mask.sum()) == 4 * (3 + 2)

    def test_deterministic(self):
        ep = build_layout_episode(T=3, text_len=1, patch_grid=(1, 1), tensor_shape=(2,))
        a, b = flatten_episode(ep), flatten_episode(ep)
        for name in ("sources", "tokens", "local_pos", "mask", "targets", "timestep"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        for pos in a.patches:
            assert np.array_equal(a.patches[pos].pixels, b.patches[pos].pixels)

    def test_local_positions(self):
        ep = build_layout_episode(T=2, tensor_shape=(3,), action_shape=(2,))
        seq = flatten_episode(ep)
        per_step = len(seq) // 2
        expected = [0, 1, 2, sequencer.LOCAL_NONE, sequencer.LOCAL_NONE, sequencer.LOCAL_NONE]
        assert seq.local_pos[:per_step].tolist() == expected
        assert seq.local_pos[per_step:].tolist() == expected

    def test_targets_follow_sources(self):
        ep = build_layout_episode(T=2, text_len=2, tensor_shape=(2,), action_shape=(1,))
        seq = flatten_episode(ep)
        for i, src in enumerate(seq.sources):
            src = ElementSource(int(src))
            if src in (ElementSource.TEXT, ElementSource.ACTION, ElementSource.SEPARATOR):
                assert seq.targets[i] == seq.tokens[i]
            else:
                assert seq.targets[i] == sequencer.TARGET_NONE
        # mask=1 implies a concrete target
        assert np.all(seq.targets[seq.mask == 1] >= 0)
        # separators never masked
        sep = seq.sources == ElementSource.SEPARATOR
        assert not np.any(seq.mask[sep])

    def test_inconsistent_schema_rejected(self):
        s1 = TensorSchema.discrete("o", (1,))
        s2 = TensorSchema.discrete("o", (2,))
        ep = Episode(
            task_id="t",
            timesteps=[
                Timestep({"o": (s1, np.array([1]))}),
                Timestep({"o": (s2, np.array([1, 2]))}),
            ],
            rewards=[0.0, 0.0],
        )
        with pytest.raises(SchemaError):
            flatten_episode(ep)

    @given(
        T=st.integers(1, 4),
        text_len=st.integers(0, 3),
        grid=st.tuples(st.integers(0, 2), st.integers(1, 2)),
        n_len=st.integers(0, 4),
        a_len=st.integers(1, 3),
    )
    @settings(max_examples=60, deadline=None)
    def test_layout_identity_property(self, T, text_len, grid, n_len, a_len):
        patch_grid = None if grid[0] == 0 else grid
        tensor_shape = None if n_len == 0 else (n_len,)
        ep = build_layout_episode(
            T=T,
            text_len=text_len,
            patch_grid=patch_grid,
            tensor_shape=tensor_shape,
            action_shape=(a_len,),
        )
        seq = flatten_episode(ep)
        layout = episode_layout(ep)
        assert len(seq) == layout.T * (layout.k + layout.m + layout.n + 1 + layout.A)
        assert int(seq.mask.sum()) == layout.T * (layout.k + layout.A)


class TestSampleSubsequence:
    def _seq(self, n=10):
        ep = build_layout_episode(T=n, tensor_shape=(), action_shape=())
        return flatten_episode(ep)

    def test_identity_window(self):
        seq = self._seq(5)  # 3 elements per step, 15 total
        rng = np.random.default_rng(0)
        out = sample_subsequence(seq, len(seq), rng)
        assert np.array_equal(out.tokens, seq.tokens)

    def test_padding(self):
        seq = self._seq(2)  # 6 elements
        out = sample_subsequence(seq, 11, np.random.default_rng(0))
        assert len(out) == 11
        assert out.real_length() == 6
        assert np.all(out.sources[6:] == ElementSource.PAD)
        assert not np.any(out.mask[6:])
        assert int(out.mask.sum()) == int(seq.mask.sum())

    def test_uniform_starts(self):
        seq = self._seq(10)  # 30 elements
        L = 21  # 10 valid starts
        rng = np.random.default_rng(7)
        counts = np.zeros(10, dtype=np.int64)
        draws = 10_000
        for _ in range(draws):
            out = sample_subsequence(seq, L, rng)
            start = int(np.nonzero(seq.tokens == out.tokens[0])[0][0])
            # tokens may repeat; identify the start via full-window match
            for s in range(10):
                if np.array_equal(seq.tokens[s : s + L], out.tokens):
                    start = s
                    break
            counts[start] += 1
        expected = draws / 10
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 27.9  # chi-square 9 dof, p = 0.001

    def test_empty_rejected(self):
        seq = self._seq(1).slice(0, 0)
        with pytest.raises(ValueError):
            sample_subsequence(seq, 4, np.random.default_rng(0))


class TestApplyPrompt:
    def _item_and_source(self, L=8, T_item=1, T_src=3):
        item_ep = build_layout_episode(T=T_item, tensor_shape=(), action_shape=(), seed=1)
        src_ep = build_layout_episode(T=T_src, tensor_shape=(), action_shape=(), seed=2)
        item = flatten_episode(item_ep).padded_to(L)
        return item, src_ep

    def test_forced_no_prompt(self, scripted_rng):
        item, src = self._item_and_source()
        out, prompted = apply_prompt(item, src, scripted_rng(randoms=[0.9]))
        assert not prompted
        assert np.array_equal(out.tokens, item.tokens)

    def test_forced_end_prompt(self, scripted_rng):
        item, src = self._item_and_source(L=8, T_item=1, T_src=3)
        src_seq = flatten_episode(src)
        # prompt budget = L // 2 = 4 -> last 4 tokens of the source
        out, prompted = apply_prompt(item, src, scripted_rng(randoms=[0.0, 0.0]))
        assert prompted
        assert np.array_equal(out.tokens[:4], src_seq.tokens[-4:])
        assert np.array_equal(out.tokens[4:7], item.tokens[:3])

    def test_prompt_keeps_modality_mask(self, scripted_rng):
        item, src = self._item_and_source()
        out, _ = apply_prompt(item, src, scripted_rng(randoms=[0.0, 0.0]))
        src_seq = flatten_episode(src)
        assert np.array_equal(out.mask[:4], src_seq.mask[-4:])

    def test_prompt_timesteps_negative(self, scripted_rng):
        item, src = self._item_and_source()
        out, _ = apply_prompt(item, src, scripted_rng(randoms=[0.0, 0.0]))
        assert np.all(out.timestep[:4] < 0)
        assert out.timestep[4] == 0

    def test_task_mismatch_rejected(self):
        item, _ = self._item_and_source()
        other = build_layout_episode(T=1, tensor_shape=(), action_shape=(), task_id="other")
        with pytest.raises(ValueError):
            apply_prompt(item, other, np.random.default_rng(0))

    def test_prompted_fraction(self):
        item, src = self._item_and_source(L=8)
        rng = np.random.default_rng(11)
        hits = sum(apply_prompt(item, src, rng)[1] for _ in range(10_000))
        assert abs(hits / 10_000 - 0.25) < 0.02

    def test_full_item_tail_displaced(self, scripted_rng):
        item_ep = build_layout_episode(T=2, tensor_shape=(), action_shape=(), seed=1)
        item = flatten_episode(item_ep)  # 6 elements, no padding
        src_seq = flatten_episode(item_ep)
        out, prompted = apply_prompt(item, item_ep, scripted_rng(randoms=[0.0, 0.0]))
        assert prompted
        # budget = len // 2 = 3 prompt elements, then the first 3 item elements
        assert np.array_equal(out.tokens[:3], src_seq.tokens[-3:])
        assert np.array_equal(out.tokens[3:], item.tokens[:3])


class TestAssembleBatch:
    def _items(self, n=2, L=12):
        ep = build_layout_episode(T=2, text_len=1, patch_grid=(1, 1), tensor_shape=(1,))
        seq = flatten_episode(ep).padded_to(L)
        return [seq.slice(0, L) for _ in range(n)]

    def test_identical_rows(self):
        batch = assemble_batch(self._items(2))
        assert np.array_equal(batch.tokens[0], batch.tokens[1])
        assert batch.batch_size == 2

    def test_mask_sum_additive(self):
        items = self._items(3)
        batch = assemble_batch(items)
        assert int(batch.mask.sum()) == sum(int(it.mask.sum()) for it in items)

    def test_unbatch_roundtrip(self):
        items = self._items(2)
        out = assemble_batch(items).unbatch()
        for a, b in zip(items, out):
            for name in ("sources", "tokens", "local_pos", "mask", "targets", "timestep"):
                assert np.array_equal(getattr(a, name), getattr(b, name))
            assert set(a.patches) == set(b.patches)
            for pos in a.patches:
                assert np.array_equal(a.patches[pos].pixels, b.patches[pos].pixels)
                assert a.patches[pos].row_interval == b.patches[pos].row_interval
            assert a.task_id == b.task_id and a.dataset == b.dataset

    def test_ragged_rejected(self):
        items = self._items(2)
        items[1] = items[1].slice(0, 7)
        with pytest.raises(SchemaError):
            assemble_batch(items)

    def test_shifted_views(self):
        batch = assemble_batch(self._items(1))
        assert np.array_equal(batch.shifted_targets()[0, :-1], batch.targets[0, 1:])
        assert batch.shifted_targets()[0, -1] == sequencer.TARGET_NONE
        assert np.array_equal(batch.shifted_mask()[0, :-1], batch.mask[0, 1:])
        assert batch.shifted_mask()[0, -1] == 0
