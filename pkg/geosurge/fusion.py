# File: geosurge/fusion.py
"""
Semantic fusion network.

Segmentation-map tokens query the RGB tokens through latent cross-attention
(keys and values are compressed into a small latent before the per-head
up-projections). Blocks are pre-norm: stream + attn(LN(stream)), then
+ MLP(LN(.)). The fused CLS row goes through a final layer norm and a linear
projection and is L2-normalized into the visual feature ``v``.

Every function takes either one sample (2-D tokens, 2-D map) or a batch
(leading axis); batches must share token counts and map size.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import (
    ACTIVATIONS, Param, Tensor, add, broadcast_to, concat_rows, gather_rows, l2_normalize_rows,
    layer_norm, matmul, reshape, scale, slice_rows, softmax_rows, sum, transpose,
)
from .config import FusionConfig
from .errors import GeoSurgeError, IntegrityError, ShapeError

logger = logging.getLogger(__name__)

POS_INIT_STD = 0.02


class _ParamGroup:
    """Dataclass mixin yielding (name, Param) pairs for every Param field, nested groups included."""

    def named(self) -> Iterator[Tuple[str, Param]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Param):
                yield value.name, value
            elif isinstance(value, _ParamGroup):
                yield from value.named()
            elif isinstance(value, list):
                for item in value:
                    yield from item.named()


@dataclass
class MlpParams(_ParamGroup):
    w1: Param
    b1: Param
    w2: Param
    b2: Param


@dataclass
class LatentAttentionParams(_ParamGroup):
    """Query projection, shared KV down-projection to the latent, per-head K/V up-projections, output projection."""
    w_q: Param
    w_dkv: Param
    w_uk: Param
    w_uv: Param
    w_o: Param
    b_o: Param


@dataclass
class FusionBlockParams(_ParamGroup):
    ln1_gamma: Param
    ln1_beta: Param
    attn: LatentAttentionParams
    ln2_gamma: Param
    ln2_beta: Param
    mlp: MlpParams


@dataclass
class EncoderBlockParams(_ParamGroup):
    """A standard pre-norm self-attention block over the RGB tokens."""
    ln1_gamma: Param
    ln1_beta: Param
    w_q: Param
    w_k: Param
    w_v: Param
    w_o: Param
    b_o: Param
    ln2_gamma: Param
    ln2_beta: Param
    mlp: MlpParams


@dataclass
class FusionModuleParams(_ParamGroup):
    config: FusionConfig
    final_ln_gamma: Param
    final_ln_beta: Param
    proj: Param
    patch_table: Optional[Param] = None
    cls_token: Optional[Param] = None
    pos_embed: Optional[Param] = None
    blocks: Optional[List[FusionBlockParams]] = None
    rgb_encoder: Optional[EncoderBlockParams] = None

    def named_params(self) -> Dict[str, Param]:
        return dict(self.named())

    def params(self) -> List[Param]:
        return list(self.named_params().values())

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.params()]))


# -----------------------------------------------------------------------------
# Initialization
# -----------------------------------------------------------------------------

class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def linear(self, name: str, fan_in: int, fan_out: int) -> Param:
        return Param(name, self.rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), self.dtype)

    def normal(self, name: str, shape, std: float) -> Param:
        return Param(name, self.rng.normal(0.0, std, size=shape), self.dtype)

    def zeros(self, name: str, n: int) -> Param:
        return Param(name, np.zeros(n), self.dtype)

    def ones(self, name: str, n: int) -> Param:
        return Param(name, np.ones(n), self.dtype)

    def mlp(self, prefix: str, d: int, hidden: int) -> MlpParams:
        return MlpParams(
            w1=self.linear(f"{prefix}/w1", d, hidden), b1=self.zeros(f"{prefix}/b1", hidden),
            w2=self.linear(f"{prefix}/w2", hidden, d), b2=self.zeros(f"{prefix}/b2", d),
        )


def init_fusion_params(config: FusionConfig, seed: int, dtype=np.float32) -> FusionModuleParams:
    init = _Init(seed, dtype)
    c = config
    rgb_encoder = None
    if c.rgb_encoder:
        if c.kv_dim % c.heads:
            raise GeoSurgeError(f"rgb encoder needs kv_dim {c.kv_dim} divisible by heads {c.heads}")
        p = "fusion/rgb_encoder"
        rgb_encoder = EncoderBlockParams(
            ln1_gamma=init.ones(f"{p}/ln1/gamma", c.kv_dim), ln1_beta=init.zeros(f"{p}/ln1/beta", c.kv_dim),
            w_q=init.linear(f"{p}/w_q", c.kv_dim, c.kv_dim), w_k=init.linear(f"{p}/w_k", c.kv_dim, c.kv_dim),
            w_v=init.linear(f"{p}/w_v", c.kv_dim, c.kv_dim), w_o=init.linear(f"{p}/w_o", c.kv_dim, c.kv_dim),
            b_o=init.zeros(f"{p}/b_o", c.kv_dim),
            ln2_gamma=init.ones(f"{p}/ln2/gamma", c.kv_dim), ln2_beta=init.zeros(f"{p}/ln2/beta", c.kv_dim),
            mlp=init.mlp(f"{p}/mlp", c.kv_dim, c.mlp_hidden),
        )

    if c.blocks == 0:
        return FusionModuleParams(
            config=c,
            final_ln_gamma=init.ones("fusion/final_ln/gamma", c.kv_dim),
            final_ln_beta=init.zeros("fusion/final_ln/beta", c.kv_dim),
            proj=init.linear("fusion/proj", c.kv_dim, c.embed_dim),
            rgb_encoder=rgb_encoder,
        )

    patch_pixels = c.patch_size * c.patch_size
    table_rows = patch_pixels * c.num_classes
    patch_table = init.linear("fusion/patch_table", table_rows, c.token_dim)
    cls_token = init.normal("fusion/cls_token", (1, c.token_dim), POS_INIT_STD)
    pos_embed = init.normal("fusion/pos_embed", (c.num_patches + 1, c.token_dim), POS_INIT_STD)
    blocks = []
    for k in range(c.blocks):
        p = f"fusion/block_{k}"
        blocks.append(FusionBlockParams(
            ln1_gamma=init.ones(f"{p}/ln1/gamma", c.token_dim), ln1_beta=init.zeros(f"{p}/ln1/beta", c.token_dim),
            attn=LatentAttentionParams(
                w_q=init.linear(f"{p}/attn/w_q", c.token_dim, c.attn_dim),
                w_dkv=init.linear(f"{p}/attn/w_dkv", c.kv_dim, c.latent_dim),
                w_uk=init.linear(f"{p}/attn/w_uk", c.latent_dim, c.attn_dim),
                w_uv=init.linear(f"{p}/attn/w_uv", c.latent_dim, c.attn_dim),
                w_o=init.linear(f"{p}/attn/w_o", c.attn_dim, c.token_dim),
                b_o=init.zeros(f"{p}/attn/b_o", c.token_dim),
            ),
            ln2_gamma=init.ones(f"{p}/ln2/gamma", c.token_dim), ln2_beta=init.zeros(f"{p}/ln2/beta", c.token_dim),
            mlp=init.mlp(f"{p}/mlp", c.token_dim, c.mlp_hidden),
        ))
    params = FusionModuleParams(
        config=c,
        final_ln_gamma=init.ones("fusion/final_ln/gamma", c.token_dim),
        final_ln_beta=init.zeros("fusion/final_ln/beta", c.token_dim),
        proj=init.linear("fusion/proj", c.token_dim, c.embed_dim),
        patch_table=patch_table,
        cls_token=cls_token,
        pos_embed=pos_embed,
        blocks=blocks,
        rgb_encoder=rgb_encoder,
    )
    logger.debug("fusion params: %d tensors, %d values", len(params.named_params()), params.parameter_count())
    return params


def fusion_params_from_tensors(config: FusionConfig, tensors: Dict[str, np.ndarray], dtype=np.float32) -> FusionModuleParams:
    """Template-initialize then overwrite every tensor from a checkpoint."""
    params = init_fusion_params(config, seed=0, dtype=dtype)
    for name, p in params.named_params().items():
        if name not in tensors:
            raise IntegrityError(f"Checkpoint is missing tensor {name}")
        arr = np.asarray(tensors[name])
        if arr.shape != p.shape:
            raise ShapeError(f"load {name}", p.shape, arr.shape)
        p.value.data[...] = arr.astype(p.data.dtype)
    return params


# -----------------------------------------------------------------------------
# Forward
# -----------------------------------------------------------------------------

def _batch3(x) -> Tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 2:
        return reshape(t, (1,) + t.shape), True
    if t.ndim != 3:
        raise ShapeError("tokens", t.shape)
    return t, False


def _squeeze(t: Tensor, squeezed: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if squeezed else t


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, width = x.shape
    return transpose(reshape(x, (b, n, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(qh.shape[-1]))
    return _merge_heads(matmul(softmax_rows(scores), vh))


def _mlp(x: Tensor, p: MlpParams, activation: str) -> Tensor:
    act = ACTIVATIONS[activation]
    return add(matmul(act(add(matmul(x, p.w1), p.b1)), p.w2), p.b2)


def tokenize_segmap(m, params: FusionModuleParams) -> Tensor:
    """
    Semantic tokens: per-patch sum of table[(pixel position, class)] rows, CLS first,
    positional embeddings added. Shape (P + 1, d_s), or (B, P + 1, d_s) for a batch.
    """
    c = params.config
    if params.patch_table is None:
        raise GeoSurgeError("fusion is disabled; there are no semantic tokens")
    seg = np.asarray(m)
    single = seg.ndim == 2
    if single:
        seg = seg[None]
    if seg.ndim != 3 or seg.shape[1:] != (c.seg_height, c.seg_width):
        raise ShapeError("tokenize_segmap", seg.shape, (c.seg_height, c.seg_width))
    if seg.size and (seg.min() < 0 or seg.max() >= c.num_classes):
        raise GeoSurgeError(f"segmentation class id out of range 0..{c.num_classes - 1}")
    b = seg.shape[0]
    ps = c.patch_size
    gh, gw = c.seg_height // ps, c.seg_width // ps
    patches = seg.astype(np.int64).reshape(b, gh, ps, gw, ps).transpose(0, 1, 3, 2, 4).reshape(b, gh * gw, ps * ps)
    idx = np.arange(ps * ps, dtype=np.int64) * c.num_classes + patches
    patch_tokens = sum(gather_rows(params.patch_table, idx), axis=2)
    cls = broadcast_to(params.cls_token, (b, 1, c.token_dim))
    tokens = add(concat_rows([cls, patch_tokens], axis=1), params.pos_embed)
    return _squeeze(tokens, single)


def latent_cross_attention(queries, kv, p: LatentAttentionParams, heads: int) -> Tensor:
    q_in, single = _batch3(queries)
    kv_in, _ = _batch3(kv)
    if q_in.shape[0] != kv_in.shape[0] or q_in.shape[-1] != p.w_q.shape[0] or kv_in.shape[-1] != p.w_dkv.shape[0]:
        raise ShapeError("latent_cross_attention", q_in.shape, kv_in.shape)
    latent = matmul(kv_in, p.w_dkv)
    out = _attend(matmul(q_in, p.w_q), matmul(latent, p.w_uk), matmul(latent, p.w_uv), heads)
    return _squeeze(add(matmul(out, p.w_o), p.b_o), single)


def fusion_block(stream, kv, p: FusionBlockParams, heads: int, activation: str = "gelu") -> Tensor:
    s, single = _batch3(stream)
    kv_in, _ = _batch3(kv)
    h = add(s, latent_cross_attention(layer_norm(s, p.ln1_gamma, p.ln1_beta), kv_in, p.attn, heads))
    out = add(h, _mlp(layer_norm(h, p.ln2_gamma, p.ln2_beta), p.mlp, activation))
    return _squeeze(out, single)


def rgb_encoder_block(rgb, p: EncoderBlockParams, heads: int, activation: str = "gelu") -> Tensor:
    x, single = _batch3(rgb)
    if x.shape[-1] != p.w_q.shape[0]:
        raise ShapeError("rgb_encoder_block", x.shape, p.w_q.shape)
    n = layer_norm(x, p.ln1_gamma, p.ln1_beta)
    attn = _attend(matmul(n, p.w_q), matmul(n, p.w_k), matmul(n, p.w_v), heads)
    h = add(x, add(matmul(attn, p.w_o), p.b_o))
    out = add(h, _mlp(layer_norm(h, p.ln2_gamma, p.ln2_beta), p.mlp, activation))
    return _squeeze(out, single)


def _check_rgb(rgb: np.ndarray, c: FusionConfig) -> np.ndarray:
    arr = np.asarray(rgb)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] < 2 or arr.shape[2] != c.kv_dim:
        raise ShapeError("rgb tokens", np.shape(rgb), ("N+1", c.kv_dim))
    if not np.all(np.isfinite(arr)):
        raise GeoSurgeError("rgb tokens contain non-finite values")
    return arr


def encode(rgb, m, params: FusionModuleParams) -> Tensor:
    """Differentiable visual features, shape (B, embed_dim), unit rows."""
    c = params.config
    rgb_arr = _check_rgb(rgb, c)
    kv = Tensor(rgb_arr.astype(params.proj.data.dtype, copy=False))
    if params.rgb_encoder is not None:
        kv = rgb_encoder_block(kv, params.rgb_encoder, c.heads, c.activation)
    if c.blocks == 0:
        cls = slice_rows(kv, 0, 1, axis=1)
    else:
        seg = np.asarray(m)
        if seg.ndim == 2:
            seg = seg[None]
        stream = tokenize_segmap(seg, params)
        for block in params.blocks:
            stream = fusion_block(stream, kv, block, c.heads, c.activation)
        cls = slice_rows(stream, 0, 1, axis=1)
    cls = reshape(cls, (cls.shape[0], cls.shape[2]))
    normed = layer_norm(cls, params.final_ln_gamma, params.final_ln_beta)
    return l2_normalize_rows(matmul(normed, params.proj))


def fuse(rgb, m, params: FusionModuleParams) -> np.ndarray:
    """The visual feature of one sample as a float64 unit vector."""
    out = encode(rgb, m, params).data.astype(np.float64)
    if np.ndim(rgb) == 2:
        out = out[0]
    return out


def encode_batch(rgb: np.ndarray, seg: np.ndarray, params: FusionModuleParams, batch_size: int = 256) -> np.ndarray:
    """Visual features for many samples without recording gradients."""
    chunks = []
    for start in range(0, rgb.shape[0], batch_size):
        stop = start + batch_size
        chunks.append(encode(rgb[start:stop], seg[start:stop], params).data.astype(np.float64))
    if not chunks:
        return np.zeros((0, params.config.embed_dim))
    return np.concatenate(chunks, axis=0)


def encoder_block_size(kv_dim: int, mlp_hidden: int) -> int:
    """Closed-form parameter count of :func:`rgb_encoder_block`."""
    d, h = kv_dim, mlp_hidden
    return 4 * d * d + d + 4 * d + (d * h + h) + (h * d + d)
