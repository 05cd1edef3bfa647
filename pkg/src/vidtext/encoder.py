"""Video encoder: per-frame tokens, cross-frame message attention, and the
temporal integration transformer.

Each encoder block regenerates one message token per frame from that frame's
CLS token, fuses the messages across frames (CFA), appends the fused message
to the frame's token sequence for intra-frame attention (IFA), and drops the
message before the feed-forward stage, so messages never persist across
blocks.  Stacked CLS outputs pass through a small temporal transformer and
average pooling to produce the clip embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rng import Rng
from .tensor import (AttentionParams, LayerNormParams, LinearParams, ShapeError,
                     Tensor, add, apply_layer_norm, broadcast_to, concat, gelu,
                     init_attention, init_layer_norm, init_linear, linear,
                     multi_head_attention, narrow, parameter, reshape, tmean,
                     transpose)


@dataclass
class EncoderConfig:
    T: int
    H: int
    W: int
    P: int
    d: int
    L_c: int
    L_m: int
    heads: int
    d_msg: Optional[int] = None

    def __post_init__(self):
        if self.d_msg is None:
            self.d_msg = self.d
        if self.H % self.P or self.W % self.P:
            raise ShapeError(f"frame {self.H}x{self.W} not divisible by patch {self.P}")
        if self.d % self.heads:
            raise ShapeError(f"dim {self.d} not divisible by {self.heads} heads")
        if self.N < 1:
            raise ShapeError("need at least one patch per frame")

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)


# ---------------------------------------------------------------------------
# Parameter bundles


@dataclass
class BlockParams:
    """Standard pre-norm transformer block (attention + FFN)."""
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ffn: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class CctBlockParams:
    """Cross-frame block: message linear + CFA on top of a plain block."""
    msg: LinearParams
    ln_cfa: LayerNormParams
    cfa: AttentionParams
    ln_attn: LayerNormParams
    ifa: AttentionParams
    ln_ffn: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class ImageEncoderParams:
    """Plain per-frame ViT; the pretend-pretrained source for adaptation."""
    patch_embed: Tensor  # (3*P*P, d)
    cls: Tensor          # (d,)
    pos_spatial: Tensor  # (N+1, d)
    blocks: list[BlockParams] = field(default_factory=list)


@dataclass
class VideoEncoderParams:
    patch_embed: Tensor
    cls: Tensor
    pos_spatial: Tensor
    blocks: list[CctBlockParams] = field(default_factory=list)


@dataclass
class MitParams:
    temp_pos: Tensor  # (T, d)
    blocks: list[BlockParams] = field(default_factory=list)


def _init_block(rng: Rng, d: int) -> BlockParams:
    return BlockParams(
        ln_attn=init_layer_norm(d),
        attn=init_attention(rng, d),
        ln_ffn=init_layer_norm(d),
        fc1=init_linear(rng, d, 4 * d),
        fc2=init_linear(rng, 4 * d, d),
    )


def make_image_encoder(cfg: EncoderConfig, rng: Rng) -> ImageEncoderParams:
    return ImageEncoderParams(
        patch_embed=parameter(rng.trunc_normal_array((3 * cfg.P * cfg.P, cfg.d), 0.02)),
        cls=parameter(rng.trunc_normal_array((cfg.d,), 0.02)),
        pos_spatial=parameter(rng.trunc_normal_array((cfg.N + 1, cfg.d), 0.02)),
        blocks=[_init_block(rng, cfg.d) for _ in range(cfg.L_c)],
    )


def init_from_image_weights(img: ImageEncoderParams, cfg: EncoderConfig,
                            rng: Rng) -> VideoEncoderParams:
    """Adapt plain per-frame weights into the cross-frame encoder.

    Intra-frame attention, FFN, and embeddings are copied bitwise; the
    message linear and CFA are fresh.  The CFA output projection starts at
    zero so each block's fused messages equal the raw messages at step 0,
    leaving the inherited computation exactly intact.
    """
    if img.patch_embed.shape != (3 * cfg.P * cfg.P, cfg.d):
        raise ShapeError(f"patch embed {img.patch_embed.shape} does not match config")
    if len(img.blocks) != cfg.L_c:
        raise ShapeError(f"source has {len(img.blocks)} blocks, config wants {cfg.L_c}")
    if img.pos_spatial.shape != (cfg.N + 1, cfg.d):
        raise ShapeError("spatial position table does not match config")

    def copy_linear(p: LinearParams) -> LinearParams:
        return LinearParams(parameter(p.weight.data.copy()), parameter(p.bias.data.copy()))

    def copy_ln(p: LayerNormParams) -> LayerNormParams:
        return LayerNormParams(parameter(p.gamma.data.copy()), parameter(p.beta.data.copy()))

    blocks = []
    for src in img.blocks:
        blocks.append(CctBlockParams(
            msg=init_linear(rng, cfg.d, cfg.d),
            ln_cfa=init_layer_norm(cfg.d),
            cfa=init_attention(rng, cfg.d, zero_out=True),
            ln_attn=copy_ln(src.ln_attn),
            ifa=AttentionParams(copy_linear(src.attn.query), copy_linear(src.attn.key),
                                copy_linear(src.attn.value), copy_linear(src.attn.out)),
            ln_ffn=copy_ln(src.ln_ffn),
            fc1=copy_linear(src.fc1),
            fc2=copy_linear(src.fc2),
        ))
    return VideoEncoderParams(
        patch_embed=parameter(img.patch_embed.data.copy()),
        cls=parameter(img.cls.data.copy()),
        pos_spatial=parameter(img.pos_spatial.data.copy()),
        blocks=blocks,
    )


def make_mit(cfg: EncoderConfig, rng: Rng) -> MitParams:
    return MitParams(
        temp_pos=parameter(rng.trunc_normal_array((cfg.T, cfg.d), 0.02)),
        blocks=[_init_block(rng, cfg.d) for _ in range(cfg.L_m)],
    )


# ---------------------------------------------------------------------------
# Forward pieces


def patchify(frame: np.ndarray, P: int) -> np.ndarray:
    """Split (H, W, 3) pixels into N flattened patches of length 3*P*P.

    Patches run row-major (top-left to bottom-right); within a patch, pixels
    run row-major with channels last.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim < 3 or frame.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3) pixels, got {frame.shape}")
    *lead, H, W, _ = frame.shape
    if H % P or W % P:
        raise ShapeError(f"frame {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = frame.reshape(*lead, gh, P, gw, P, 3)
    x = np.moveaxis(x, -3, -4)  # (..., gh, gw, P, P, 3)
    return x.reshape(*lead, gh * gw, 3 * P * P)


def embed_frame(patches: Tensor, patch_embed: Tensor, cls: Tensor,
                pos_spatial: Tensor) -> Tensor:
    """Tokens = [CLS; patches @ E] + spatial positions; (..., N+1, d)."""
    proj = tensor_matmul_patch(patches, patch_embed)
    *lead, _, d = proj.shape
    cls_tok = broadcast_to(reshape(cls, (1,) * (proj.ndim - 1) + (d,)), (*lead, 1, d))
    return add(concat([cls_tok, proj], axis=-2), pos_spatial)


def tensor_matmul_patch(patches: Tensor, patch_embed: Tensor) -> Tensor:
    from .tensor import matmul
    return matmul(patches, patch_embed, label="patch.embed")


def make_messages(cls_tokens: Tensor, msg: LinearParams) -> Tensor:
    """One message per frame, a linear map of that frame's CLS token."""
    return linear(cls_tokens, msg, label="msg.linear")


def feed_forward(x: Tensor, ln: LayerNormParams, fc1: LinearParams,
                 fc2: LinearParams, label: str) -> Tensor:
    return add(x, linear(gelu(linear(apply_layer_norm(x, ln), fc1, f"{label}.fc1")),
                         fc2, f"{label}.fc2"))


def plain_block(x: Tensor, p: BlockParams, heads: int, label: str = "attn") -> Tensor:
    normed = apply_layer_norm(x, p.ln_attn)
    x = add(x, multi_head_attention(normed, normed, normed, p.attn, heads, label))
    return feed_forward(x, p.ln_ffn, p.fc1, p.fc2, "ffn" if label == "attn" else f"{label}.ffn")


PostIfaHook = Callable[[Tensor, Tensor], tuple[Tensor, Tensor]]


def cct_block(z: Tensor, p: CctBlockParams, heads: int,
              post_ifa_hook: Optional[PostIfaHook] = None) -> Tensor:
    """One cross-frame block over (..., T, N+1, d) tokens.

    The optional hook receives the post-IFA frame tokens and the discarded
    message state; it exists so tests can overwrite the message state and
    verify the block output cannot depend on it.
    """
    *lead, T, n_tok, d = z.shape
    cls = reshape(narrow(z, -2, 0, 1), (*lead, T, d))
    msgs = make_messages(cls, p.msg)
    normed_msgs = apply_layer_norm(msgs, p.ln_cfa)
    fused = add(msgs, multi_head_attention(normed_msgs, normed_msgs, normed_msgs,
                                           p.cfa, heads, label="cfa"))
    seq = concat([z, reshape(fused, (*lead, T, 1, d))], axis=-2)
    normed = apply_layer_norm(seq, p.ln_attn)
    seq = add(seq, multi_head_attention(normed, normed, normed, p.ifa, heads, label="ifa"))
    z_hat = narrow(seq, -2, 0, n_tok)
    m_bar = narrow(seq, -2, n_tok, 1)
    if post_ifa_hook is not None:
        z_hat, m_bar = post_ifa_hook(z_hat, m_bar)
    return feed_forward(z_hat, p.ln_ffn, p.fc1, p.fc2, "ffn")


def encode_frames(clip: np.ndarray, enc: VideoEncoderParams, cfg: EncoderConfig,
                  post_ifa_hook: Optional[PostIfaHook] = None
                  ) -> tuple[Tensor, Tensor]:
    """Run embedding and all cross-frame blocks on (..., T, H, W, 3) pixels.

    Returns the stacked CLS outputs (..., T, d) and the final token states
    (..., T, N+1, d); the latter feed the prompting module.
    """
    patches = Tensor(patchify(clip, cfg.P))
    tokens = embed_frame(patches, enc.patch_embed, enc.cls, enc.pos_spatial)
    for blk in enc.blocks:
        tokens = cct_block(tokens, blk, cfg.heads, post_ifa_hook)
    *lead, T, _, d = tokens.shape
    h = reshape(narrow(tokens, -2, 0, 1), (*lead, T, d))
    return h, tokens


def encode_video(h: Tensor, mit: MitParams, heads: int) -> Tensor:
    """Clip embedding: temporal positions, MIT blocks, mean over frames."""
    y = add(h, mit.temp_pos)
    for blk in mit.blocks:
        y = plain_block(y, blk, heads, label="mit")
    return tmean(y, axis=-2)


# ---------------------------------------------------------------------------
# Baseline forward paths over the plain image tower


def image_tokens(clip: np.ndarray, img: ImageEncoderParams, cfg: EncoderConfig) -> Tensor:
    patches = Tensor(patchify(clip, cfg.P))
    return embed_frame(patches, img.patch_embed, img.cls, img.pos_spatial)


def encode_frames_plain(clip: np.ndarray, img: ImageEncoderParams,
                        cfg: EncoderConfig) -> Tensor:
    """Per-frame ViT with no cross-frame interaction; returns (..., T, d)."""
    tokens = image_tokens(clip, img, cfg)
    for blk in img.blocks:
        tokens = plain_block(tokens, blk, cfg.heads, label="attn")
    *lead, T, _, d = tokens.shape
    return reshape(narrow(tokens, -2, 0, 1), (*lead, T, d))


def encode_frames_joint(clip: np.ndarray, img: ImageEncoderParams,
                        cfg: EncoderConfig) -> Tensor:
    """Joint space-time attention: one sequence of all T*(N+1) tokens."""
    tokens = image_tokens(clip, img, cfg)
    *lead, T, n_tok, d = tokens.shape
    flat = reshape(tokens, (*lead, T * n_tok, d))
    for blk in img.blocks:
        flat = plain_block(flat, blk, cfg.heads, label="attn")
    tokens = reshape(flat, (*lead, T, n_tok, d))
    return reshape(narrow(tokens, -2, 0, 1), (*lead, T, d))
