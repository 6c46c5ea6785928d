import math

import numpy as np
import pytest

from seqpolicy import model as M
from seqpolicy.errors import CapacityError, ChecksumError, ConfigError
from seqpolicy.model.network import embed_batch, hidden_fwd
from seqpolicy.sequencer import ElementSource, assemble_batch

from conftest import manual_sequence


def micro_cfg(**overrides):
    base = dict(
        blocks=2,
        heads=2,
        width=16,
        ff_hidden=32,
        kv_size=8,
        context=32,
        local_pos_table=16,
        patch_pos_vocab=16,
        stochastic_depth=0.0,
        dropout=0.0,
    )
    base.update(overrides)
    return M.ModelConfig(**base)


def small_batch(L=12, seed=0, with_sep=True):
    """Two timesteps mixing every element kind; separators optional so that
    reduced-vocabulary configs can be exercised (the separator id is 33024)."""
    sep = [("sep",)] if with_sep else []
    spec = (
        [("text", 45), ("patch", (0.25, 0.5), (0.4, 0.6)), ("tensor", 7)]
        + sep
        + [("action", 3), ("ts",), ("text", 33), ("patch", (0.0, 0.5), (0.5, 1.0)), ("tensor", 7)]
        + sep
        + [("action", 9)]
    )
    n_elements = len([e for e in spec if e[0] != "ts"])
    spec = spec + [("pad",)] * (L - n_elements)
    return assemble_batch([manual_sequence(spec, seed=seed)])


class TestPatchPositions:
    def test_worked_example_row(self):
        assert M.quantize_patch_interval((0.25, 0.5)) == (32, 64)
        assert M.patch_position_index((0.25, 0.5), mode="eval") == 48

    def test_worked_example_col(self):
        assert M.quantize_patch_interval((0.4, 0.6)) == (51, 77)
        assert M.patch_position_index((0.4, 0.6), mode="eval") == 64

    def test_full_span_clamped(self):
        lo, hi = M.quantize_patch_interval((0.0, 1.0))
        assert (lo, hi) == (0, 127)

    def test_train_uniform_over_interval(self):
        rng = np.random.default_rng(0)
        draws = np.array(
            [M.patch_position_index((0.25, 0.5), "train", rng) for _ in range(20_000)]
        )
        assert draws.min() == 32 and draws.max() == 64
        counts = np.bincount(draws - 32, minlength=33)
        expected = 20_000 / 33
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 62.5  # 32 dof, p = 0.001

    def test_degenerate_interval_rejected(self):
        with pytest.raises(ValueError):
            M.quantize_patch_interval((0.5, 0.5))
        with pytest.raises(ValueError):
            M.quantize_patch_interval((-0.1, 0.5))


class TestLocalPositions:
    def test_timestep_pattern(self):
        cfg = micro_cfg()
        seq = manual_sequence(
            [("tensor", 1), ("tensor", 2), ("tensor", 3), ("sep",), ("action", 0), ("action", 1)]
        )
        idx = M.local_position_indices(seq, cfg)
        sep, act = cfg.separator_local_index, cfg.action_local_index
        assert idx.tolist() == [0, 1, 2, sep, act, act]

    def test_identical_timesteps_identical_patterns(self):
        cfg = micro_cfg()
        step = [("tensor", 1), ("tensor", 2), ("sep",), ("action", 0)]
        seq = manual_sequence(step + [("ts",)] + step)
        idx = M.local_position_indices(seq, cfg)
        assert idx[:4].tolist() == idx[4:].tolist()

    def test_capacity_error(self):
        cfg = M.tiny()  # table 512, capacity 510
        spec = [("tensor", 0)] * 512 + [("sep",)]
        seq = manual_sequence(spec)
        with pytest.raises(CapacityError):
            M.local_position_indices(seq, cfg)


class TestEmbedding:
    def test_all_padding_embeds_to_zero(self):
        cfg = micro_cfg()
        params = M.init_params(cfg, seed=0)
        batch = assemble_batch([manual_sequence([("pad",)] * 6)])
        emb, _ = embed_batch(params, cfg, batch, "eval", None)
        assert not emb.any()

    def test_same_token_same_local_equal_vectors(self):
        cfg = micro_cfg()
        params = M.init_params(cfg, seed=0)
        step = [("tensor", 5), ("sep",), ("action", 1)]
        batch = assemble_batch([manual_sequence(step + [("ts",)] + step)])
        emb, _ = embed_batch(params, cfg, batch, "eval", None)
        assert np.array_equal(emb[0, 0], emb[0, 3])
        assert np.array_equal(emb[0, 2], emb[0, 5])

    def test_patch_embedding_eval_deterministic(self):
        cfg = micro_cfg()
        params = M.init_params(cfg, seed=0)
        batch = small_batch()
        a, _ = embed_batch(params, cfg, batch, "eval", None)
        b, _ = embed_batch(params, cfg, batch, "eval", None)
        assert np.array_equal(a, b)

    def test_token_range_checked(self):
        cfg = micro_cfg(vocab=50)
        params = M.init_params(cfg, seed=0)
        batch = assemble_batch([manual_sequence([("tensor", 51), ("action", 0)])])
        with pytest.raises(ValueError):
            embed_batch(params, cfg, batch, "eval", None)

    def test_zero_action_inputs(self):
        cfg = micro_cfg(zero_action_inputs=True)
        params = M.init_params(cfg, seed=0)
        batch = assemble_batch(
            [manual_sequence([("tensor", 5), ("sep",), ("action", 1), ("action", 2)])]
        )
        emb, _ = embed_batch(params, cfg, batch, "eval", None)
        assert not emb[0, 2].any() and not emb[0, 3].any()
        assert emb[0, 0].any() and emb[0, 1].any()


class TestForward:
    def test_causality(self):
        cfg = micro_cfg()
        params = M.init_params(cfg, seed=1)
        base = [("tensor", 3), ("tensor", 4), ("sep",), ("action", 1), ("ts",),
                ("tensor", 5), ("tensor", 6), ("sep",), ("action", 0)]
        logits_a = M.forward_logits(params, cfg, assemble_batch([manual_sequence(base)]))
        j = 4  # element index of the first timestep-2 observation
        changed = list(base)
        changed[5] = ("tensor", 9)  # list index 5 == element index 4 (ts marker)
        logits_b = M.forward_logits(params, cfg, assemble_batch([manual_sequence(changed)]))
        assert np.array_equal(logits_a[0, :j], logits_b[0, :j])
        assert not np.allclose(logits_a[0, j:], logits_b[0, j:])

    def test_eval_bit_reproducible(self):
        cfg = micro_cfg()
        params = M.init_params(cfg, seed=2)
        batch = small_batch()
        a = M.forward_logits(params, cfg, batch)
        b = M.forward_logits(params, cfg, batch)
        assert np.array_equal(a, b)

    def test_zero_output_projection_uniform_softmax(self):
        cfg = micro_cfg()
        params = M.init_params(cfg, seed=3)
        params["embed/vocab"] = np.zeros_like(params["embed/vocab"])
        batch = small_batch()
        logits = M.forward_logits(params, cfg, batch)
        assert np.allclose(logits, 0.0)

    def test_context_overflow(self):
        cfg = micro_cfg(context=4)
        params = M.init_params(cfg, seed=0)
        batch = small_batch(L=12)
        with pytest.raises(CapacityError):
            M.forward_logits(params, cfg, batch)

    def test_stochastic_depth_never_skip_equals_eval(self):
        cfg = micro_cfg(stochastic_depth=0.4)
        params = M.init_params(cfg, seed=4)
        batch = small_batch()

        class NeverSkip:
            def random(self):
                return 1.0  # never below the skip probability

        streams = M.RngStreams(0)
        streams.stochastic_depth = NeverSkip()
        emb, _ = embed_batch(params, cfg, batch, "eval", None)
        train_h, _ = hidden_fwd(params, cfg, emb, "pretrain", streams)
        eval_h, _ = hidden_fwd(params, cfg, emb, "eval", None)
        assert np.array_equal(train_h, eval_h)

    def test_stochastic_depth_skips_change_output(self):
        cfg = micro_cfg(stochastic_depth=0.9)
        params = M.init_params(cfg, seed=4)
        batch = small_batch()
        streams = M.RngStreams(0)
        emb, _ = embed_batch(params, cfg, batch, "eval", None)
        train_h, _ = hidden_fwd(params, cfg, emb, "pretrain", streams)
        eval_h, _ = hidden_fwd(params, cfg, emb, "eval", None)
        assert not np.array_equal(train_h, eval_h)


class TestMaskedLoss:
    def test_uniform_logits_single_target(self):
        V = 33025
        logits = np.zeros((1, 1, V))
        res = M.masked_nll_loss(logits, np.array([[7]]), np.array([[1]]))
        assert res.total == pytest.approx(math.log(V), rel=1e-12)
        assert res.masked_tokens == 1
        assert res.mean == pytest.approx(math.log(V), rel=1e-12)

    def test_all_zero_mask(self):
        logits = np.random.default_rng(0).normal(size=(2, 3, 5))
        res = M.masked_nll_loss(logits, np.full((2, 3), -1), np.zeros((2, 3)))
        assert res.total == 0.0 and res.masked_tokens == 0 and res.mean == 0.0

    def test_matches_double_precision_oracle(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(2, 4, 7))
        targets = rng.integers(0, 7, size=(2, 4))
        mask = rng.integers(0, 2, size=(2, 4))
        res = M.masked_nll_loss(logits, targets, mask)
        # independent oracle: direct double-precision softmax cross-entropy
        expected = 0.0
        for b in range(2):
            for l in range(4):
                if mask[b, l]:
                    row = logits[b, l].astype(np.float64)
                    p = np.exp(row) / np.exp(row).sum()
                    expected -= math.log(p[targets[b, l]])
        assert res.total == pytest.approx(expected, abs=1e-10)

    def test_mask_zero_targets_irrelevant(self):
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=5, dtype=np.float64)
        batch = small_batch(with_sep=False)
        res1, grads1 = M.loss_and_grads(params, cfg, batch, mode="eval")
        # clobber targets wherever the shifted mask is zero
        batch2 = small_batch(with_sep=False)
        shifted = batch2.shifted_mask()
        batch2.targets[:, 1:][shifted[:, :-1] == 0] = 11
        batch2.targets[batch2.mask == 0] = 11
        res2, grads2 = M.loss_and_grads(params, cfg, batch2, mode="eval")
        assert res1.total == res2.total
        for k in grads1:
            assert np.array_equal(grads1[k], grads2[k])

    def test_loss_linearity(self):
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=6, dtype=np.float64)
        item = small_batch(with_sep=False).unbatch()[0]
        single = assemble_batch([item])
        double = assemble_batch([item, item])
        res1, grads1 = M.loss_and_grads(params, cfg, single, mode="eval")
        res2, grads2 = M.loss_and_grads(params, cfg, double, mode="eval")
        assert res2.total == pytest.approx(2 * res1.total, rel=1e-12)
        for k in grads1:
            assert np.allclose(2 * grads1[k], grads2[k], rtol=1e-9, atol=1e-12)

    def test_unused_vocab_rows_zero_grad(self):
        # With nothing masked there is no output-projection contribution, so
        # rows never fed as inputs must have exactly zero gradient. (With a
        # shared embedding and masked targets present, the softmax partition
        # function gives every row an output-side gradient by construction.)
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=7, dtype=np.float64)
        batch = small_batch(with_sep=False)
        batch.mask[:] = 0
        res, grads = M.loss_and_grads(params, cfg, batch, mode="eval")
        assert res.masked_tokens == 0
        used = set(batch.tokens[batch.tokens >= 0].tolist())
        unused = sorted(set(range(64)) - used)
        assert unused, "fixture should leave some rows untouched"
        assert not grads["embed/vocab"][unused].any()

    def test_per_item_partition(self):
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=8, dtype=np.float64)
        items = [small_batch(seed=s, with_sep=False).unbatch()[0] for s in (0, 1)]
        batch = assemble_batch(items)
        res, _ = M.loss_and_grads(params, cfg, batch, mode="eval")
        assert res.per_item.sum() == pytest.approx(res.total, rel=1e-12)

    def test_chain_rule_consistency(self):
        # total sequence log-probability equals the sum of one-position-at-a-time
        # conditionals evaluated with growing prefixes
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=9, dtype=np.float64)
        spec = [("tensor", 3), ("tensor", 8), ("action", 1), ("ts",), ("tensor", 5), ("tensor", 9), ("action", 2)]
        full = assemble_batch([manual_sequence(spec)])
        res, _ = M.loss_and_grads(params, cfg, full, mode="eval")
        total = 0.0
        shifted_mask = full.shifted_mask()[0]
        shifted_tgt = full.shifted_targets()[0]
        for l in range(full.seq_len):
            if not shifted_mask[l]:
                continue
            prefix = assemble_batch([manual_sequence(spec).slice(0, l + 1)])
            logits = M.forward_logits(params, cfg, prefix, positions=np.array([l]))
            logp = logits[0] - np.log(np.exp(logits[0] - logits[0].max()).sum()) - logits[0].max()
            total -= logp[shifted_tgt[l]]
        assert total == pytest.approx(res.total, rel=1e-9)


class TestSharedEmbedding:
    def test_input_and_output_contributions_accumulate(self):
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=10, dtype=np.float64)
        batch = small_batch(with_sep=False)
        _, grads = M.loss_and_grads(params, cfg, batch, mode="eval")
        # target-only rows (predicted but never fed as input) still get grads
        targets = set(batch.shifted_targets()[batch.shifted_mask() == 1].tolist())
        inputs = set(batch.tokens[batch.tokens >= 0].tolist())
        target_only = targets - inputs
        for t in target_only:
            assert grads["embed/vocab"][t].any()


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            micro_cfg(width=18)  # not divisible by 4
        with pytest.raises(ConfigError):
            micro_cfg(blocks=0)
        with pytest.raises(ConfigError):
            micro_cfg(stochastic_depth=1.0)

    def test_presets(self):
        tiny = M.tiny()
        assert (tiny.blocks, tiny.heads, tiny.width) == (4, 4, 128)
        full = M.FULL_SCALE["79m"]
        assert (full.blocks, full.heads, full.width, full.kv_size) == (8, 24, 768, 32)
        assert M.FULL_SCALE["1.18b"].ff_hidden == 8192

    def test_param_count_monotone_in_width(self):
        small = M.init_params(micro_cfg(width=16), seed=0)
        large = M.init_params(micro_cfg(width=32, kv_size=16), seed=0)
        assert M.parameter_count(large) > M.parameter_count(small)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = micro_cfg(vocab=64)
        params = M.init_params(cfg, seed=11)
        streams = M.RngStreams(3)
        streams.stochastic_depth.random(5)  # advance a cursor
        opt = {
            "step": 17,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.ones_like(v) for k, v in params.items()},
        }
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, cfg, params, optimizer_state=opt,
                          rng_states=streams.state_dict(), extra={"step": 17})
        loaded = M.load_checkpoint(path)
        assert loaded["cfg"] == cfg
        assert set(loaded["params"]) == set(params)
        for k in params:
            assert np.array_equal(loaded["params"][k], params[k])
        assert loaded["optimizer_state"]["step"] == 17
        assert np.array_equal(loaded["optimizer_state"]["v"]["final_ln/g"], np.ones(16, np.float32))
        restored = M.RngStreams(0)
        restored.load_state(loaded["rng_states"])
        assert restored.stochastic_depth.random() == streams.stochastic_depth.random()
        assert loaded["extra"] == {"step": 17}

    def test_corruption_detected(self, tmp_path):
        cfg = micro_cfg(vocab=64)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, cfg, M.init_params(cfg, seed=0))
        data = bytearray(path.read_bytes())
        data[50] ^= 0x55
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            M.load_checkpoint(path)
