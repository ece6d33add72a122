"""The MutualFormer block: patch embedding, per-modality self-attention,
cross-diffusion across modalities, a coarse single-stream Transformer branch and
the aggregation

    P = FFN(LN(g(H_r || H_d || H))) + h(X_r || X_d).

Blocks stack: for layer t > 1 the fused tokens of layer t - 1 are re-projected
by two independent linear heads into the next pair of modality streams.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import numeric as nm
from .attention import (AttentionOutput, AttentionParams, CdaConfig, combine_modality,
                        cross_diffusion_attention, self_attention)
from .errors import ConfigError, ShapeError
from .numeric import Tensor
from .params import LayerNormParams, Linear, TwoLayerMap, uniform_init


@dataclasses.dataclass
class TokenSet:
    features: Tensor        # (..., n, d) projected patches
    positions: Tensor       # (n, d) fixed positional encoding
    modality: str = "r"

    def __post_init__(self):
        self.features = nm.as_tensor(self.features)
        self.positions = nm.as_tensor(self.positions)
        if self.features.shape[-2:] != self.positions.shape[-2:]:
            raise ShapeError(f"features {self.features.shape} vs positions {self.positions.shape}")
        if self.modality not in ("r", "d"):
            raise ValueError(f"modality must be 'r' or 'd', got {self.modality!r}")

    @property
    def tokens(self) -> Tensor:
        return self.features + self.positions

    @property
    def n(self) -> int:
        return self.features.shape[-2]


@dataclasses.dataclass
class StackConfig:
    layers: int = 2
    heads: int = 4
    width: int = 64
    patches: tuple = (64, 16, 4, 1)

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"need at least one layer, got {self.layers}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")


# --------------------------------------------------------------------------- embedding

def positional_encoding_2d(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Fixed sinusoidal encoding; the first d/2 channels encode the patch row,
    the last d/2 the patch column. Tokens are ordered row-major."""
    if d % 4:
        raise ConfigError(f"positional encoding width {d} must be divisible by 4")
    half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, half, 2) / half))

    def enc(pos):
        ang = np.outer(np.arange(pos, dtype=np.float64), freqs)
        out = np.zeros((pos, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows, cols = enc(grid_h), enc(grid_w)
    pe = np.zeros((grid_h, grid_w, d))
    pe[:, :, :half] = rows[:, None, :]
    pe[:, :, half:] = cols[None, :, :]
    return pe.reshape(grid_h * grid_w, d)


def _grid(patch, h, w):
    ph, pw = (patch, patch) if np.isscalar(patch) else patch
    if h % ph or w % pw:
        raise ConfigError(f"{h}x{w} grid does not tile into {ph}x{pw} patches")
    return ph, pw, h // ph, w // pw


def patchify(grid, patch) -> Tensor:
    """(B, H, W, C) -> (B, N, ph*pw*C); patches row-major, each flattened (ph, pw, C)."""
    grid = nm.as_tensor(grid)
    b, h, w, c = grid.shape
    ph, pw, gh, gw = _grid(patch, h, w)
    x = nm.reshape(grid, (b, gh, ph, gw, pw, c))
    x = nm.permute(x, (0, 1, 3, 2, 4, 5))
    return nm.reshape(x, (b, gh * gw, ph * pw * c))


def unpatchify(tokens, hw, patch, channels: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = nm.as_tensor(tokens)
    h, w = hw
    ph, pw, gh, gw = _grid(patch, h, w)
    b = tokens.shape[0]
    x = nm.reshape(tokens, (b, gh, gw, ph, pw, channels))
    x = nm.permute(x, (0, 1, 3, 2, 4, 5))
    return nm.reshape(x, (b, h, w, channels))


@dataclasses.dataclass
class EmbedParams:
    proj_r: Tensor      # (ph*pw*C_r, d), no bias
    proj_d: Tensor

    @classmethod
    def init(cls, rng, patch_dim_r: int, patch_dim_d: int, d: int):
        return cls(nm.parameter(uniform_init(rng, patch_dim_r, (patch_dim_r, d))),
                   nm.parameter(uniform_init(rng, patch_dim_d, (patch_dim_d, d))))


def embed(grid_r, grid_d, p: EmbedParams, patch) -> tuple[TokenSet, TokenSet]:
    """Tile both modality maps into patches, project to width d and attach the
    fixed 2-D positional encoding."""
    grid_r, grid_d = nm.as_tensor(grid_r), nm.as_tensor(grid_d)
    if grid_r.ndim == 3:
        grid_r = nm.reshape(grid_r, (1,) + grid_r.shape)
        grid_d = nm.reshape(grid_d, (1,) + grid_d.shape)
    if grid_r.shape[:3] != grid_d.shape[:3]:
        raise ShapeError(f"modality grids differ: {grid_r.shape} vs {grid_d.shape}")
    _, h, w, _ = grid_r.shape
    _, _, gh, gw = _grid(patch, h, w)
    d = p.proj_r.shape[1]
    pos = nm.Tensor(positional_encoding_2d(gh, gw, d))
    fr = nm.matmul(patchify(grid_r, patch), p.proj_r)
    fd = nm.matmul(patchify(grid_d, patch), p.proj_d)
    return TokenSet(fr, pos, "r"), TokenSet(fd, pos, "d")


# --------------------------------------------------------------------------- block

@dataclasses.dataclass
class CoarseParams:
    """Single-stream Transformer over the channel-concatenated inputs."""

    in_proj: Linear           # 2d -> d
    attn: AttentionParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: TwoLayerMap

    @classmethod
    def init(cls, rng, d: int, heads: int, hidden: int):
        return cls(Linear.init(rng, 2 * d, d), AttentionParams.init(rng, d, heads),
                   LayerNormParams.init(d), LayerNormParams.init(d),
                   TwoLayerMap.init(rng, d, hidden, d))


def transformer_layer(u: Tensor, attn: AttentionParams, ln1: LayerNormParams,
                      ln2: LayerNormParams, ffn: TwoLayerMap) -> Tensor:
    """Pre-norm Transformer layer: u + MHSA(LN(u)), then + FFN(LN(.))."""
    z = u + self_attention(ln1(u), attn).mixed
    return z + ffn(ln2(z))


def coarse_forward(xcat: Tensor, p: CoarseParams) -> Tensor:
    return transformer_layer(p.in_proj(xcat), p.attn, p.ln1, p.ln2, p.ffn)


@dataclasses.dataclass
class BlockParams:
    attn_r: AttentionParams
    attn_d: AttentionParams
    f_r: TwoLayerMap          # 2d -> d
    f_d: TwoLayerMap
    g: Linear                 # (2d or 3d) -> d
    h: Linear                 # 2d -> d
    ln: LayerNormParams
    ffn: TwoLayerMap          # d -> hidden -> d
    coarse: CoarseParams | None = None
    resplit_r: Linear | None = None   # only on layers t > 1: P -> X_r'
    resplit_d: Linear | None = None
    cda: CdaConfig = dataclasses.field(default_factory=CdaConfig)

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, *, coarse: bool = True,
             hidden: int | None = None, resplit: bool = False, cda: CdaConfig | None = None):
        hidden = hidden or 2 * d
        return cls(
            attn_r=AttentionParams.init(rng, d, heads),
            attn_d=AttentionParams.init(rng, d, heads),
            f_r=TwoLayerMap.init(rng, 2 * d, d, d),
            f_d=TwoLayerMap.init(rng, 2 * d, d, d),
            g=Linear.init(rng, (3 if coarse else 2) * d, d),
            h=Linear.init(rng, 2 * d, d),
            ln=LayerNormParams.init(d),
            ffn=TwoLayerMap.init(rng, d, hidden, d),
            coarse=CoarseParams.init(rng, d, heads, hidden) if coarse else None,
            resplit_r=Linear.init(rng, d, d) if resplit else None,
            resplit_d=Linear.init(rng, d, d) if resplit else None,
            cda=cda or CdaConfig(),
        )


@dataclasses.dataclass
class BlockOutput:
    p: Tensor
    sa_r: AttentionOutput
    sa_d: AttentionOutput
    cda_rd: AttentionOutput
    cda_dr: AttentionOutput
    h_r: Tensor
    h_d: Tensor
    h_coarse: Tensor | None


def _block_input(x) -> Tensor:
    return x.tokens if isinstance(x, TokenSet) else nm.as_tensor(x)


def block_forward(xr, xd, p: BlockParams) -> BlockOutput:
    """One MutualFormer block. ``xr``/``xd`` are TokenSets (positions are added)
    or raw token tensors."""
    x_r, x_d = _block_input(xr), _block_input(xd)
    if x_r.shape != x_d.shape:
        raise ShapeError(f"block_forward: modality tokens differ, {x_r.shape} vs {x_d.shape}")
    sa_r = self_attention(x_r, p.attn_r)
    sa_d = self_attention(x_d, p.attn_d)
    rd, dr = cross_diffusion_attention(sa_r.similarity, sa_d.similarity,
                                       sa_r.values, sa_d.values, p.cda)
    h_r = combine_modality(sa_r.mixed, rd.mixed, p.f_r)
    h_d = combine_modality(sa_d.mixed, dr.mixed, p.f_d)
    x_cat = nm.concat_cols(x_r, x_d)
    parts = [h_r, h_d]
    h_coarse = None
    if p.coarse is not None:
        h_coarse = coarse_forward(x_cat, p.coarse)
        parts.append(h_coarse)
    fused = p.g(nm.concat(parts, axis=-1))
    out = p.ffn(p.ln(fused)) + p.h(x_cat)
    return BlockOutput(out, sa_r, sa_d, rd, dr, h_r, h_d, h_coarse)


def stack_forward(xr, xd, cfg: StackConfig, params: list[BlockParams], trace: list | None = None) -> Tensor:
    """Run ``cfg.layers`` blocks; returns the last layer's fused tokens."""
    if len(params) != cfg.layers:
        raise ConfigError(f"{cfg.layers} layers configured but {len(params)} parameter sets given")
    for t, bp in enumerate(params):
        if t > 0 and (bp.resplit_r is None or bp.resplit_d is None):
            raise ConfigError(f"layer {t + 1} is missing its re-projection heads")
    out = block_forward(xr, xd, params[0])
    if trace is not None:
        trace.append(out)
    for bp in params[1:]:
        out = block_forward(bp.resplit_r(out.p), bp.resplit_d(out.p), bp)
        if trace is not None:
            trace.append(out)
    return out.p


def init_stack(rng, cfg: StackConfig, *, coarse: bool = True, cda: CdaConfig | None = None):
    return [BlockParams.init(rng, cfg.width, cfg.heads, coarse=coarse, resplit=t > 0, cda=cda)
            for t in range(cfg.layers)]
