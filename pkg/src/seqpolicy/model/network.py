"""Embedding function, decoder-only transformer, and the masked loss.

Parameters live in a flat ``{name: ndarray}`` dict. Forward passes stash the
caches needed for the hand-written reverse pass; ``loss_and_grads`` returns
exact gradients for every parameter, with the shared vocabulary matrix
accumulating both its input-lookup and output-projection contributions.

Modes: ``"pretrain"`` applies stochastic depth (sub-layers skipped with the
configured probability), ``"finetune"`` applies dropout on attention weights
and feedforward outputs instead, ``"eval"`` applies neither and is
deterministic. Random draws come from named streams whose cursors are
checkpointable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import CapacityError, MissingGradientError
from ..sequencer import ElementSource, MaskedBatch
from .config import ModelConfig
from .ops import (
    gelu_bwd,
    gelu_fwd,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    linear_fwd,
    softmax_bwd,
    softmax_last,
    truncated_normal,
)
from .patch_embed import init_patch_params, patch_embed_bwd, patch_embed_fwd
from .positions import patch_position_index, resolve_local_indices

STREAM_NAMES = ("stochastic_depth", "dropout", "patch_pos")


class RngStreams:
    """Named random streams with save/restore-able cursors."""

    def __init__(self, seed: int | None = 0):
        children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
        for name, seq in zip(STREAM_NAMES, children):
            setattr(self, name, np.random.Generator(np.random.PCG64(seq)))

    def state_dict(self) -> dict:
        return {name: getattr(self, name).bit_generator.state for name in STREAM_NAMES}

    def load_state(self, states: dict) -> None:
        for name in STREAM_NAMES:
            getattr(self, name).bit_generator.state = states[name]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(
    cfg: ModelConfig, seed: int = 0, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) weights, zero biases, unit norm gains."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    std = 0.02
    p: dict[str, np.ndarray] = {
        "embed/vocab": truncated_normal(rng, (cfg.vocab, cfg.width), std, dtype),
        "embed/local_pos": truncated_normal(rng, (cfg.local_pos_table, cfg.width), std, dtype),
        "embed/patch_row": truncated_normal(rng, (cfg.patch_pos_vocab, cfg.width), std, dtype),
        "embed/patch_col": truncated_normal(rng, (cfg.patch_pos_vocab, cfg.width), std, dtype),
    }
    p.update(init_patch_params(cfg, rng, dtype))
    hk = cfg.heads * cfg.kv_size
    for i in range(cfg.blocks):
        pfx = f"block{i}"
        p[f"{pfx}/ln1/g"] = np.ones(cfg.width, dtype)
        p[f"{pfx}/ln1/b"] = np.zeros(cfg.width, dtype)
        p[f"{pfx}/attn/wq"] = truncated_normal(rng, (cfg.width, hk), std, dtype)
        p[f"{pfx}/attn/bq"] = np.zeros(hk, dtype)
        p[f"{pfx}/attn/wk"] = truncated_normal(rng, (cfg.width, hk), std, dtype)
        p[f"{pfx}/attn/bk"] = np.zeros(hk, dtype)
        p[f"{pfx}/attn/wv"] = truncated_normal(rng, (cfg.width, hk), std, dtype)
        p[f"{pfx}/attn/bv"] = np.zeros(hk, dtype)
        p[f"{pfx}/attn/wo"] = truncated_normal(rng, (hk, cfg.width), std, dtype)
        p[f"{pfx}/attn/bo"] = np.zeros(cfg.width, dtype)
        p[f"{pfx}/ln2/g"] = np.ones(cfg.width, dtype)
        p[f"{pfx}/ln2/b"] = np.zeros(cfg.width, dtype)
        p[f"{pfx}/ffn/wg"] = truncated_normal(rng, (cfg.width, cfg.ff_hidden), std, dtype)
        p[f"{pfx}/ffn/bg"] = np.zeros(cfg.ff_hidden, dtype)
        p[f"{pfx}/ffn/wv"] = truncated_normal(rng, (cfg.width, cfg.ff_hidden), std, dtype)
        p[f"{pfx}/ffn/bv"] = np.zeros(cfg.ff_hidden, dtype)
        p[f"{pfx}/ffn/wo"] = truncated_normal(rng, (cfg.ff_hidden, cfg.width), std, dtype)
        p[f"{pfx}/ffn/bo"] = np.zeros(cfg.width, dtype)
    p["final_ln/g"] = np.ones(cfg.width, dtype)
    p["final_ln/b"] = np.zeros(cfg.width, dtype)
    return p


def parameter_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def validate_gradients(params: dict, grads: dict) -> None:
    missing = set(params) - set(grads)
    if missing:
        raise MissingGradientError(f"no gradient for parameters: {sorted(missing)}")


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def embed_batch(
    params: dict,
    cfg: ModelConfig,
    batch: MaskedBatch,
    mode: str,
    streams: RngStreams | None,
):
    """Element sequences to (B, L, width) vectors; padding embeds to zero."""
    dtype = params["embed/vocab"].dtype
    b, length = batch.tokens.shape
    if length > cfg.context:
        raise CapacityError(f"sequence length {length} exceeds context {cfg.context}")
    emb = np.zeros((b, length, cfg.width), dtype=dtype)

    token_mask = np.isin(
        batch.sources,
        (ElementSource.TEXT, ElementSource.TENSOR, ElementSource.SEPARATOR, ElementSource.ACTION),
    )
    if cfg.zero_action_inputs:
        token_mask &= batch.sources != ElementSource.ACTION
    token_ids = batch.tokens[token_mask].astype(np.int64)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab):
        raise ValueError(f"token id outside [0, {cfg.vocab})")
    emb[token_mask] = params["embed/vocab"][token_ids]

    local_idx = resolve_local_indices(batch.sources, batch.local_pos, cfg)
    add_mask = token_mask | (batch.sources == ElementSource.PATCH)
    local_sel = local_idx[add_mask]
    emb[add_mask] += params["embed/local_pos"][local_sel]

    patch_cache = None
    row_idx = col_idx = None
    if batch.patch_pixels is not None and len(batch.patch_pixels):
        pe, patch_cache = patch_embed_fwd(params, cfg, batch.patch_pixels)
        rng = streams.patch_pos if streams is not None else None
        row_idx = np.array(
            [
                patch_position_index((lo, hi), mode, rng, cfg.patch_pos_vocab)
                for lo, hi in batch.patch_intervals[:, 0:2]
            ],
            dtype=np.int64,
        )
        col_idx = np.array(
            [
                patch_position_index((lo, hi), mode, rng, cfg.patch_pos_vocab)
                for lo, hi in batch.patch_intervals[:, 2:4]
            ],
            dtype=np.int64,
        )
        pe = pe + params["embed/patch_row"][row_idx] + params["embed/patch_col"][col_idx]
        emb[batch.patch_slots[:, 0], batch.patch_slots[:, 1]] += pe

    cache = (token_mask, token_ids, add_mask, local_sel, patch_cache, row_idx, col_idx, batch)
    return emb, cache


def embed_bwd(demb: np.ndarray, cache, params: dict, grads: dict) -> None:
    token_mask, token_ids, add_mask, local_sel, patch_cache, row_idx, col_idx, batch = cache
    np.add.at(grads["embed/vocab"], token_ids, demb[token_mask])
    np.add.at(grads["embed/local_pos"], local_sel, demb[add_mask])
    if patch_cache is not None:
        dpe = demb[batch.patch_slots[:, 0], batch.patch_slots[:, 1]]
        np.add.at(grads["embed/patch_row"], row_idx, dpe)
        np.add.at(grads["embed/patch_col"], col_idx, dpe)
        for name, g in patch_embed_bwd(dpe, patch_cache, params).items():
            grads[name] += g


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

def _attention_fwd(x, params, pfx, cfg, dropout_p, drop_rng):
    b, length, _ = x.shape
    h, k = cfg.heads, cfg.kv_size
    q2, cq = linear_fwd(x, params[f"{pfx}/wq"], params[f"{pfx}/bq"])
    k2, ck = linear_fwd(x, params[f"{pfx}/wk"], params[f"{pfx}/bk"])
    v2, cv = linear_fwd(x, params[f"{pfx}/wv"], params[f"{pfx}/bv"])
    q = q2.reshape(b, length, h, k).transpose(0, 2, 1, 3)
    kk = k2.reshape(b, length, h, k).transpose(0, 2, 1, 3)
    v = v2.reshape(b, length, h, k).transpose(0, 2, 1, 3)
    scores = (q @ kk.transpose(0, 1, 3, 2)) / math.sqrt(k)
    causal = np.tril(np.ones((length, length), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    probs = softmax_last(scores)
    if dropout_p > 0.0:
        keep = (drop_rng.random(probs.shape) >= dropout_p).astype(x.dtype)
        keep /= 1.0 - dropout_p
        probs_used = probs * keep
    else:
        keep = None
        probs_used = probs
    ctx = (probs_used @ v).transpose(0, 2, 1, 3).reshape(b, length, h * k)
    out, co = linear_fwd(ctx, params[f"{pfx}/wo"], params[f"{pfx}/bo"])
    cache = (cq, ck, cv, q, kk, v, probs, keep, co, (b, length, h, k))
    return out, cache


def _attention_bwd(dout, cache, params, pfx, grads):
    cq, ck, cv, q, kk, v, probs, keep, co, (b, length, h, k) = cache
    dctx, dwo, dbo = linear_bwd(dout, co, params[f"{pfx}/wo"])
    grads[f"{pfx}/wo"] += dwo
    grads[f"{pfx}/bo"] += dbo
    dctx = dctx.reshape(b, length, h, k).transpose(0, 2, 1, 3)
    probs_used = probs * keep if keep is not None else probs
    dprobs_used = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs_used.transpose(0, 1, 3, 2) @ dctx
    dprobs = dprobs_used * keep if keep is not None else dprobs_used
    dscores = softmax_bwd(dprobs, probs) / math.sqrt(k)
    dq = dscores @ kk
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq2 = dq.transpose(0, 2, 1, 3).reshape(b, length, h * k)
    dk2 = dk.transpose(0, 2, 1, 3).reshape(b, length, h * k)
    dv2 = dv.transpose(0, 2, 1, 3).reshape(b, length, h * k)
    dxq, dwq, dbq = linear_bwd(dq2, cq, params[f"{pfx}/wq"])
    dxk, dwk, dbk = linear_bwd(dk2, ck, params[f"{pfx}/wk"])
    dxv, dwv, dbv = linear_bwd(dv2, cv, params[f"{pfx}/wv"])
    grads[f"{pfx}/wq"] += dwq
    grads[f"{pfx}/bq"] += dbq
    grads[f"{pfx}/wk"] += dwk
    grads[f"{pfx}/bk"] += dbk
    grads[f"{pfx}/wv"] += dwv
    grads[f"{pfx}/bv"] += dbv
    return dxq + dxk + dxv


def _ffn_fwd(x, params, pfx, dropout_p, drop_rng):
    g, cg = linear_fwd(x, params[f"{pfx}/wg"], params[f"{pfx}/bg"])
    u, cu = linear_fwd(x, params[f"{pfx}/wv"], params[f"{pfx}/bv"])
    a, cge = gelu_fwd(g)
    hidden = a * u
    y, cy = linear_fwd(hidden, params[f"{pfx}/wo"], params[f"{pfx}/bo"])
    if dropout_p > 0.0:
        keep = (drop_rng.random(y.shape) >= dropout_p).astype(x.dtype)
        keep /= 1.0 - dropout_p
        y = y * keep
    else:
        keep = None
    return y, (cg, cu, cge, a, u, cy, keep)


def _ffn_bwd(dy, cache, params, pfx, grads):
    cg, cu, cge, a, u, cy, keep = cache
    if keep is not None:
        dy = dy * keep
    dhidden, dwo, dbo = linear_bwd(dy, cy, params[f"{pfx}/wo"])
    grads[f"{pfx}/wo"] += dwo
    grads[f"{pfx}/bo"] += dbo
    da = dhidden * u
    du = dhidden * a
    dg = gelu_bwd(da, cge)
    dxg, dwg, dbg = linear_bwd(dg, cg, params[f"{pfx}/wg"])
    dxu, dwv, dbv = linear_bwd(du, cu, params[f"{pfx}/wv"])
    grads[f"{pfx}/wg"] += dwg
    grads[f"{pfx}/bg"] += dbg
    grads[f"{pfx}/wv"] += dwv
    grads[f"{pfx}/bv"] += dbv
    return dxg + dxu


def hidden_fwd(params, cfg: ModelConfig, emb, mode: str, streams: RngStreams | None):
    """Pre-norm causal blocks, then the final layer norm."""
    sd_p = cfg.stochastic_depth if mode == "pretrain" else 0.0
    drop_p = cfg.dropout if mode == "finetune" else 0.0
    x = emb
    caches = []
    for i in range(cfg.blocks):
        skip_attn = sd_p > 0.0 and streams.stochastic_depth.random() < sd_p
        skip_ffn = sd_p > 0.0 and streams.stochastic_depth.random() < sd_p
        if skip_attn:
            c_ln1 = c_attn = None
        else:
            h, c_ln1 = layernorm_fwd(x, params[f"block{i}/ln1/g"], params[f"block{i}/ln1/b"])
            a, c_attn = _attention_fwd(
                h, params, f"block{i}/attn", cfg, drop_p,
                streams.dropout if streams is not None else None,
            )
            x = x + a
        if skip_ffn:
            c_ln2 = c_ffn = None
        else:
            h, c_ln2 = layernorm_fwd(x, params[f"block{i}/ln2/g"], params[f"block{i}/ln2/b"])
            f, c_ffn = _ffn_fwd(
                h, params, f"block{i}/ffn", drop_p,
                streams.dropout if streams is not None else None,
            )
            x = x + f
        caches.append((skip_attn, c_ln1, c_attn, skip_ffn, c_ln2, c_ffn))
    out, c_lnf = layernorm_fwd(x, params["final_ln/g"], params["final_ln/b"])
    return out, (caches, c_lnf)


def hidden_bwd(dout, cache, params, cfg: ModelConfig, grads):
    caches, c_lnf = cache
    dx, dg, db = layernorm_bwd(dout, c_lnf)
    grads["final_ln/g"] += dg
    grads["final_ln/b"] += db
    for i in reversed(range(cfg.blocks)):
        skip_attn, c_ln1, c_attn, skip_ffn, c_ln2, c_ffn = caches[i]
        if not skip_ffn:
            dh = _ffn_bwd(dx, c_ffn, params, f"block{i}/ffn", grads)
            dln, dg, db = layernorm_bwd(dh, c_ln2)
            grads[f"block{i}/ln2/g"] += dg
            grads[f"block{i}/ln2/b"] += db
            dx = dx + dln
        if not skip_attn:
            dh = _attention_bwd(dx, c_attn, params, f"block{i}/attn", grads)
            dln, dg, db = layernorm_bwd(dh, c_ln1)
            grads[f"block{i}/ln1/g"] += dg
            grads[f"block{i}/ln1/b"] += db
            dx = dx + dln
    return dx


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    """Masked negative log-likelihood, as the raw sum and per-token mean."""

    total: float
    masked_tokens: int
    per_item: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return self.total / self.masked_tokens if self.masked_tokens else 0.0


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def masked_nll_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> LossResult:
    """-sum over masked positions of log softmax(logits)[target].

    ``logits``: (..., V); ``targets`` and ``mask`` match the leading shape.
    Positions with mask 0 contribute exactly zero whatever their target says.
    An all-zero mask yields a defined 0 loss.
    """
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = np.asarray(targets).reshape(-1)
    flat_mask = np.asarray(mask).reshape(-1)
    sel = np.nonzero(flat_mask != 0)[0]
    if sel.size == 0:
        return LossResult(total=0.0, masked_tokens=0)
    picked = flat_targets[sel]
    if picked.min() < 0 or picked.max() >= logits.shape[-1]:
        raise ValueError("masked position has no concrete target token")
    logp = _log_softmax(flat_logits[sel].astype(np.float64))
    nll = -logp[np.arange(sel.size), picked]
    return LossResult(total=float(nll.sum()), masked_tokens=int(sel.size))


def loss_and_grads(
    params: dict,
    cfg: ModelConfig,
    batch: MaskedBatch,
    mode: str = "pretrain",
    streams: RngStreams | None = None,
    reduction: str = "sum",
):
    """Forward plus exact reverse pass for every parameter.

    ``reduction="sum"`` differentiates the raw summed loss; ``"mean"``
    scales gradients by 1/masked_tokens (the reported LossResult is
    unaffected: it always carries the sum and the count).
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    emb, emb_cache = embed_batch(params, cfg, batch, mode, streams)
    hidden, h_cache = hidden_fwd(params, cfg, emb, mode, streams)

    tgt = batch.shifted_targets()
    msk = batch.shifted_mask()
    rows, cols = np.nonzero(msk != 0)
    per_item = np.zeros(batch.batch_size, dtype=np.float64)
    if rows.size == 0:
        return LossResult(total=0.0, masked_tokens=0, per_item=per_item), zero_grads(params)

    hsel = hidden[rows, cols]
    picked = tgt[rows, cols].astype(np.int64)
    if picked.min() < 0 or picked.max() >= cfg.vocab:
        raise ValueError("masked position has no concrete target token")
    logits = hsel @ params["embed/vocab"].T
    # fused log-softmax: one exp pass; nll gathered without a full logp array
    shifted = logits - logits.max(axis=-1, keepdims=True)
    arange = np.arange(rows.size)
    shifted_t = shifted[arange, picked].copy()
    np.exp(shifted, out=shifted)
    z = shifted.sum(axis=-1, keepdims=True)
    nll = np.log(z).ravel() - shifted_t
    np.add.at(per_item, rows, nll.astype(np.float64))
    total = float(nll.sum(dtype=np.float64))

    dlogits = shifted
    dlogits /= z
    dlogits[arange, picked] -= 1.0
    if reduction == "mean":
        dlogits /= rows.size

    grads = {k: np.zeros_like(v) for k, v in params.items() if k != "embed/vocab"}
    grads["embed/vocab"] = dlogits.T @ hsel
    dhsel = dlogits @ params["embed/vocab"]
    dhidden = np.zeros_like(hidden)
    dhidden[rows, cols] = dhsel

    demb = hidden_bwd(dhidden, h_cache, params, cfg, grads)
    embed_bwd(demb, emb_cache, params, grads)
    validate_gradients(params, grads)
    return LossResult(total=total, masked_tokens=int(rows.size), per_item=per_item), grads


def forward_logits(
    params: dict,
    cfg: ModelConfig,
    batch: MaskedBatch,
    positions: np.ndarray | None = None,
    mode: str = "eval",
    streams: RngStreams | None = None,
) -> np.ndarray:
    """Logits over the vocabulary; all positions, or one position per row."""
    emb, _ = embed_batch(params, cfg, batch, mode, streams)
    hidden, _ = hidden_fwd(params, cfg, emb, mode, streams)
    if positions is None:
        flat = hidden.reshape(-1, cfg.width) @ params["embed/vocab"].T
        return flat.reshape(batch.batch_size, batch.seq_len, cfg.vocab)
    rows = np.arange(batch.batch_size)
    return hidden[rows, positions] @ params["embed/vocab"].T


@dataclass
class ModelState:
    """A config, its parameters, and the model-side random streams."""

    cfg: ModelConfig
    params: dict[str, np.ndarray]
    streams: RngStreams

    @staticmethod
    def initialize(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelState":
        return ModelState(
            cfg=cfg, params=init_params(cfg, seed=seed, dtype=dtype), streams=RngStreams(seed)
        )
