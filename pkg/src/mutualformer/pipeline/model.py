"""The desk-scale RGB-D saliency network.

Twin conv towers produce four levels of features per modality, each with a
sigmoid probability head used only by the focal term. A fusion module merges
the two modalities at every level; a two-phase top-down decoder turns the
fused maps into the saliency prediction. Only the fusion module depends on the
chosen strategy, and its parameters live under ``fuse.*``.
"""
from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .. import numeric as nm
from ..attention import (AttentionParams, CdaConfig, cross_attention,
                         cross_diffusion_attention, self_attention)
from ..block import (StackConfig, embed, init_stack, stack_forward, transformer_layer,
                     unpatchify, EmbedParams)
from ..errors import ConfigError
from ..numeric import Tensor
from ..params import LayerNormParams, Linear, TwoLayerMap, name_rng, uniform_init

LEVELS = (2, 3, 4, 5)


class FusionStrategy(str, enum.Enum):
    ADD = "add"
    CAT = "cat"
    TRANSFORMER = "transformer"
    CROSSFORMER = "crossformer"
    CROSSFORMER_CDA = "crossformer_cda"
    MUTUALFORMER = "mutualformer"

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown fusion strategy {value!r}; choose one of {names}") from None


@dataclasses.dataclass
class ModelConfig:
    strategy: str = "mutualformer"
    enc_channels: tuple = (8, 16, 16, 16)
    dec_channels: int = 8
    width: int = 64
    heads: int = 4
    layers: int = 2
    patch: int = 4
    epsilon: float = 0.6
    coarse: bool = True

    def __post_init__(self):
        FusionStrategy.parse(self.strategy)
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if len(self.enc_channels) != len(LEVELS):
            raise ConfigError(f"need {len(LEVELS)} encoder widths, got {self.enc_channels}")
        StackConfig(self.layers, self.heads, self.width)
        CdaConfig(self.epsilon)


# --------------------------------------------------------------------------- layers

@dataclasses.dataclass
class Conv:
    w: Tensor
    b: Tensor
    stride: int = 1
    padding: int = 0

    def __call__(self, x):
        return nm.conv2d(x, self.w, self.b, self.stride, self.padding)

    @classmethod
    def init(cls, rng, k: int, c_in: int, c_out: int, stride: int = 1):
        w = nm.parameter(uniform_init(rng, k * k * c_in, (k, k, c_in, c_out)))
        return cls(w, nm.parameter(np.zeros(c_out)), stride, k // 2)


def _prob(logits: Tensor) -> Tensor:
    """(B, h, w, 1) logits -> (B, h, w) probabilities."""
    return nm.reshape(nm.sigmoid(logits), logits.shape[:3])


# --------------------------------------------------------------------------- encoder

@dataclasses.dataclass
class EncoderLevel:
    down: Conv        # 3x3, stride 2
    refine: Conv      # 3x3
    head: Conv        # 1x1 -> 1 channel


@dataclasses.dataclass
class EncoderFeatures:
    f_r: dict          # level -> (B, h, w, C)
    f_d: dict
    p_r: dict          # level -> (B, h, w) foreground probability
    p_d: dict


def init_encoder(rng, cfg: ModelConfig) -> dict:
    towers = {}
    for modality, c_in in (("r", 3), ("d", 1)):
        levels, prev = [], c_in
        for c in cfg.enc_channels:
            levels.append(EncoderLevel(Conv.init(rng, 3, prev, c, stride=2),
                                       Conv.init(rng, 3, c, c), Conv.init(rng, 1, c, 1)))
            prev = c
        towers[modality] = levels
    return towers


def encoder_forward(enc: dict, rgb, depth) -> EncoderFeatures:
    feats = EncoderFeatures({}, {}, {}, {})
    for modality, x in (("r", rgb), ("d", depth)):
        x = nm.as_tensor(x)
        for level, p in zip(LEVELS, enc[modality]):
            x = nm.relu(p.refine(nm.relu(p.down(x))))
            getattr(feats, "f_" + modality)[level] = x
            getattr(feats, "p_" + modality)[level] = _prob(p.head(x))
    return feats


# --------------------------------------------------------------------------- fusion

@dataclasses.dataclass
class CrossLayer:
    """Pre-norm dual-stream layer used by both CrossFormer variants."""

    attn_r: AttentionParams
    attn_d: AttentionParams
    ln_r: LayerNormParams
    ln_d: LayerNormParams
    ln2_r: LayerNormParams
    ln2_d: LayerNormParams
    ffn_r: TwoLayerMap
    ffn_d: TwoLayerMap

    @classmethod
    def init(cls, rng, d: int, heads: int):
        return cls(AttentionParams.init(rng, d, heads), AttentionParams.init(rng, d, heads),
                   LayerNormParams.init(d), LayerNormParams.init(d),
                   LayerNormParams.init(d), LayerNormParams.init(d),
                   TwoLayerMap.init(rng, d, 2 * d, d), TwoLayerMap.init(rng, d, 2 * d, d))


@dataclasses.dataclass
class ViTLayer:
    attn: AttentionParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: TwoLayerMap

    @classmethod
    def init(cls, rng, d: int, heads: int):
        return cls(AttentionParams.init(rng, d, heads), LayerNormParams.init(d),
                   LayerNormParams.init(d), TwoLayerMap.init(rng, d, 2 * d, d))


@dataclasses.dataclass
class TokenFusion:
    """Shared scaffolding of the token-based strategies: patch embedding, the
    mixer, and an output head mapping fused tokens back to a feature grid."""

    embed: EmbedParams
    out: Linear                        # d -> patch * patch * C
    merge: Linear | None = None        # 2d -> d for dual-stream mixers
    mixer: list = dataclasses.field(default_factory=list)


def _patch(cfg: ModelConfig, level_size: int) -> int:
    return min(cfg.patch, level_size)


def init_fusion(rng, cfg: ModelConfig, sizes: dict) -> dict:
    strategy = FusionStrategy.parse(cfg.strategy)
    d, heads = cfg.width, cfg.heads
    out = {}
    for level, c in zip(LEVELS, cfg.enc_channels):
        key = f"l{level}"
        if strategy is FusionStrategy.ADD:
            continue
        if strategy is FusionStrategy.CAT:
            out[key] = Conv.init(rng, 1, 2 * c, c)
            continue
        pdim = _patch(cfg, sizes[level]) ** 2 * c
        # zero output head: every token strategy starts as the plain sum F_r + F_d
        head = Linear(nm.parameter(np.zeros((d, pdim))), nm.parameter(np.zeros(pdim)))
        tf = TokenFusion(EmbedParams.init(rng, pdim, pdim, d), head)
        if strategy is FusionStrategy.MUTUALFORMER:
            tf.mixer = init_stack(rng, StackConfig(cfg.layers, heads, d), coarse=cfg.coarse,
                                  cda=CdaConfig(cfg.epsilon))
        elif strategy is FusionStrategy.TRANSFORMER:
            tf.merge = Linear.init(rng, 2 * d, d)
            tf.mixer = [ViTLayer.init(rng, d, heads) for _ in range(cfg.layers)]
        else:
            tf.merge = Linear.init(rng, 2 * d, d)
            tf.mixer = [CrossLayer.init(rng, d, heads) for _ in range(cfg.layers)]
        out[key] = tf
    return out


def _interleave(z_r: Tensor, z_d: Tensor) -> Tensor:
    return nm.concat_cols(z_r, z_d)


def _token_mix(strategy: FusionStrategy, tf: TokenFusion, tr, td, cfg: ModelConfig) -> Tensor:
    if strategy is FusionStrategy.MUTUALFORMER:
        scfg = StackConfig(cfg.layers, cfg.heads, cfg.width)
        return stack_forward(tr, td, scfg, tf.mixer)
    x_r, x_d = tr.tokens, td.tokens
    if strategy is FusionStrategy.TRANSFORMER:
        b, n, d = x_r.shape
        z = nm.concat([x_r, x_d], axis=-2)
        for layer in tf.mixer:
            z = transformer_layer(z, layer.attn, layer.ln1, layer.ln2, layer.ffn)
        # (B, 2n, d) -> (B, n, 2d): row i holds [z_r[i], z_d[i]]
        z = nm.reshape(nm.permute(nm.reshape(z, (b, 2, n, d)), (0, 2, 1, 3)), (b, n, 2 * d))
        return tf.merge(z)
    cda = CdaConfig(cfg.epsilon)
    for layer in tf.mixer:
        a_r, a_d = layer.ln_r(x_r), layer.ln_d(x_d)
        if strategy is FusionStrategy.CROSSFORMER:
            rd, dr = cross_attention(a_r, a_d, layer.attn_r, layer.attn_d)
            m_r, m_d = rd.mixed, dr.mixed
        else:
            sa_r = self_attention(a_r, layer.attn_r)
            sa_d = self_attention(a_d, layer.attn_d)
            rd, dr = cross_diffusion_attention(sa_r.similarity, sa_d.similarity,
                                               sa_r.values, sa_d.values, cda)
            m_r = nm.matmul(rd.mixed, layer.attn_r.w_o)
            m_d = nm.matmul(dr.mixed, layer.attn_d.w_o)
        x_r, x_d = x_r + m_r, x_d + m_d
        x_r = x_r + layer.ffn_r(layer.ln2_r(x_r))
        x_d = x_d + layer.ffn_d(layer.ln2_d(x_d))
    return tf.merge(_interleave(x_r, x_d))


def fuse(fusion: dict, feats: EncoderFeatures, cfg: ModelConfig) -> dict:
    """Per-level fused maps D^l. Token strategies add their output to F_r + F_d."""
    strategy = FusionStrategy.parse(cfg.strategy)
    out = {}
    for level in LEVELS:
        f_r, f_d = feats.f_r[level], feats.f_d[level]
        if strategy is FusionStrategy.ADD:
            out[level] = f_r + f_d
            continue
        p = fusion[f"l{level}"]
        if strategy is FusionStrategy.CAT:
            out[level] = p(nm.concat([f_r, f_d], axis=-1))
            continue
        b, h, w, c = f_r.shape
        patch = _patch(cfg, h)
        tr, td = embed(f_r, f_d, p.embed, patch)
        tokens = _token_mix(strategy, p, tr, td, cfg)
        grid = unpatchify(p.out(tokens), (h, w), patch, c)
        out[level] = f_r + f_d + grid
    return out


# --------------------------------------------------------------------------- decoder

@dataclasses.dataclass
class Refine:
    a: Conv     # 3x3, 2c -> c
    b: Conv     # 3x3, c -> c

    def __call__(self, x):
        return nm.relu(self.b(nm.relu(self.a(x))))


@dataclasses.dataclass
class DecoderParams:
    lateral: dict          # "l2".."l5": 1x1 C_l -> c
    phase1: dict           # "l2".."l4": Refine
    phase2: dict
    head1: Conv            # final head of phase 1
    head2: Conv            # final head of phase 2
    level_heads: dict      # "l2".."l5": 1x1 c -> 1 on phase-2 features


@dataclasses.dataclass
class DecoderOutput:
    phase_maps: list       # per phase, (B, H, W) probabilities
    level_maps: dict       # level -> (B, H, W) probabilities
    final: Tensor


def init_decoder(rng, cfg: ModelConfig) -> DecoderParams:
    c = cfg.dec_channels
    lateral = {f"l{l}": Conv.init(rng, 1, cl, c) for l, cl in zip(LEVELS, cfg.enc_channels)}
    phases = [{f"l{l}": Refine(Conv.init(rng, 3, 2 * c, c), Conv.init(rng, 3, c, c))
               for l in LEVELS[:-1]} for _ in range(2)]
    return DecoderParams(lateral, phases[0], phases[1], Conv.init(rng, 1, c, 1),
                         Conv.init(rng, 1, c, 1),
                         {f"l{l}": Conv.init(rng, 1, c, 1) for l in LEVELS})


def _top_down(lat: dict, refine: dict) -> dict:
    x = lat[LEVELS[-1]]
    out = {LEVELS[-1]: x}
    for level in reversed(LEVELS[:-1]):
        y = lat[level]
        x = refine[f"l{level}"](nm.concat([nm.resize_bilinear(x, y.shape[1:3]), y], axis=-1))
        out[level] = x
    return out


def decoder_forward(dec: DecoderParams, fused: dict, image_size) -> DecoderOutput:
    lat = {l: dec.lateral[f"l{l}"](fused[l]) for l in LEVELS}
    first = _top_down(lat, dec.phase1)
    logit1 = dec.head1(first[LEVELS[0]])
    guided = {l: lat[l] * nm.sigmoid(nm.resize_bilinear(logit1, lat[l].shape[1:3])) for l in LEVELS}
    second = _top_down(guided, dec.phase2)
    logit2 = dec.head2(second[LEVELS[0]])

    def full(logit):
        return _prob(nm.resize_bilinear(logit, image_size))

    phase_maps = [full(logit1), full(logit2)]
    level_maps = {l: full(dec.level_heads[f"l{l}"](second[l])) for l in LEVELS}
    return DecoderOutput(phase_maps, level_maps, phase_maps[-1])


# --------------------------------------------------------------------------- model

@dataclasses.dataclass
class ModelOutput:
    features: EncoderFeatures
    fused: dict
    decoder: DecoderOutput

    @property
    def prediction(self) -> Tensor:
        return self.decoder.final


def level_sizes(image_size: int) -> dict:
    return {l: image_size // 2 ** (l - 1) for l in LEVELS}


def init_model(seed: int, cfg: ModelConfig, image_size: int) -> dict:
    """Parameter tree {"encoder", "fuse", "decoder"}; each group draws from its
    own generator so non-fusion parameters do not depend on the strategy."""
    if image_size % 16:
        raise ConfigError(f"image size must be divisible by 16, got {image_size}")
    sizes = level_sizes(image_size)
    for level in LEVELS:
        if sizes[level] % _patch(cfg, sizes[level]):
            raise ConfigError(f"level {level} grid {sizes[level]} does not tile into patches of {cfg.patch}")
    return {
        "encoder": init_encoder(name_rng(seed, "encoder"), cfg),
        "fuse": init_fusion(name_rng(seed, "fuse"), cfg, sizes),
        "decoder": init_decoder(name_rng(seed, "decoder"), cfg),
    }


def forward(params: dict, cfg: ModelConfig, rgb, depth) -> ModelOutput:
    feats = encoder_forward(params["encoder"], rgb, depth)
    fused = fuse(params["fuse"], feats, cfg)
    size = np.shape(rgb)[1:3]
    return ModelOutput(feats, fused, decoder_forward(params["decoder"], fused, size))


def attention_trace(params: dict, cfg: ModelConfig, rgb, depth, level: int) -> dict:
    """First-layer similarity matrices of the MutualFormer fusion at ``level``
    for the first sample: S_r, S_d, their normalised forms, S_rd and S_dr."""
    if FusionStrategy.parse(cfg.strategy) is not FusionStrategy.MUTUALFORMER:
        raise ConfigError("attention dumps need the mutualformer fusion strategy")
    if level not in LEVELS:
        raise ConfigError(f"level must be one of {LEVELS}, got {level}")
    feats = encoder_forward(params["encoder"], rgb[:1], depth[:1])
    f_r = feats.f_r[level]
    tf = params["fuse"][f"l{level}"]
    tr, td = embed(f_r, feats.f_d[level], tf.embed, _patch(cfg, f_r.shape[1]))
    trace: list = []
    stack_forward(tr, td, StackConfig(cfg.layers, cfg.heads, cfg.width), tf.mixer, trace=trace)
    first = trace[0]
    s_r, s_d = first.sa_r.similarity, first.sa_d.similarity
    return {
        "S_r": s_r.data[0], "S_d": s_d.data[0],
        "S_r_hat": nm.sym_normalize(s_r).data[0], "S_d_hat": nm.sym_normalize(s_d).data[0],
        "S_rd": first.cda_rd.similarity.data[0], "S_dr": first.cda_dr.similarity.data[0],
    }
