"""The multi-modal mutual enhancement model.

Two sub-modules refine each modality's backbone feature before fusion:
channel gating driven by the modality's own pooled descriptor (self-gating)
and by the other modalities' pooled descriptors (cross-gating), then a
cross-modality consensus map that scores per-position agreement between the
two spatial modalities across pyramid scales and reweights spatial pooling.
Classification heads fuse an appearance+motion score with an audio score;
a gradient-reversal discriminator drives domain alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    affine,
    concat_channels,
    conv1x1,
    downsample2x,
    global_avg_pool,
    grad_reverse,
    mul,
    record_node,
    relu,
    reshape,
    softmax_xent,
    upsample_to,
)
from .rng import Rng

MODALITY_ORDER = ("rgb", "flow", "audio")
ABLATIONS = ("baseline", "smr", "cmc", "full")
PEARSON_MODES = ("centered", "as-written")

_DEGENERATE_NORM = 1e-12


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelDims:
    """Feature geometry and class counts the parameter shapes derive from."""

    rgb_channels: int
    flow_channels: int
    audio_channels: int
    height: int
    width: int
    verb_classes: int
    noun_classes: int

    def channels(self, modality: str) -> int:
        return {"rgb": self.rgb_channels, "flow": self.flow_channels,
                "audio": self.audio_channels}[modality]


@dataclass
class SmrParams:
    """Both gating bottlenecks for one modality (weights + zero-init biases)."""

    w1_self: Tensor
    b1_self: Tensor
    w2_self: Tensor
    b2_self: Tensor
    w1_cross: Tensor
    b1_cross: Tensor
    w2_cross: Tensor
    b2_cross: Tensor

    @property
    def channels(self) -> int:
        return self.w2_self.shape[0]

    def self_gate_param_count(self) -> int:
        return (self.w1_self.size + self.b1_self.size
                + self.w2_self.size + self.b2_self.size)


def self_gate_param_count(channels: int, ratio: int) -> int:
    """Closed form for the self-gate size: 2*c*(c/r) + c/r + c."""
    bottleneck = channels // ratio
    return 2 * channels * bottleneck + bottleneck + channels


@dataclass
class CmcParams:
    """Latent projections for the consensus sub-module plus the scale count."""

    rgb_w: Tensor
    rgb_b: Tensor
    flow_w: Tensor
    flow_b: Tensor
    levels: int


@dataclass
class HeadParams:
    """Classifier heads and the two-layer domain discriminator."""

    verb_w: Tensor
    verb_b: Tensor
    noun_w: Tensor
    noun_b: Tensor
    audio_verb_w: Tensor
    audio_verb_b: Tensor
    audio_noun_w: Tensor
    audio_noun_b: Tensor
    disc_hidden_w: Tensor
    disc_hidden_b: Tensor
    disc_out_w: Tensor
    disc_out_b: Tensor


@dataclass
class M3emParams:
    smr: dict[str, SmrParams]
    cmc: CmcParams
    heads: HeadParams

    def named(self) -> dict[str, Tensor]:
        """Canonically ordered name -> tensor map (checkpoint / optimizer order)."""
        out: dict[str, Tensor] = {}
        for modality in MODALITY_ORDER:
            p = self.smr[modality]
            for f in fields(SmrParams):
                out[f"smr.{modality}.{f.name}"] = getattr(p, f.name)
        for name in ("rgb_w", "rgb_b", "flow_w", "flow_b"):
            out[f"cmc.{name}"] = getattr(self.cmc, name)
        for f in fields(HeadParams):
            out[f"head.{f.name}"] = getattr(self.heads, f.name)
        return out

    def total_param_count(self) -> int:
        return sum(t.size for t in self.named().values())


def _uniform_init(rng: Rng, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.split("param", name).uniform(shape, -bound, bound)
    return Tensor(data, requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_params(dims: ModelDims, *, bottleneck_ratio: int, pyramid_levels: int,
                latent_channels: int = 0, disc_hidden: int = 0, seed: int = 0) -> M3emParams:
    """Build all learnable tensors: uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)]
    weights from a seeded stream, zero biases.

    ``latent_channels`` / ``disc_hidden`` of 0 select the defaults
    (rgb channels // 2, discriminator input // 2).
    """
    rng = Rng(seed)
    smr: dict[str, SmrParams] = {}
    for modality in MODALITY_ORDER:
        c = dims.channels(modality)
        if bottleneck_ratio < 1 or c % bottleneck_ratio != 0:
            raise ValueError(
                f"bottleneck ratio {bottleneck_ratio} must divide {modality} channels {c}")
        mid = c // bottleneck_ratio
        c_in = sum(dims.channels(m) for m in MODALITY_ORDER if m != modality)
        smr[modality] = SmrParams(
            w1_self=_uniform_init(rng, f"smr.{modality}.w1_self", (mid, c), c),
            b1_self=_zeros((mid,)),
            w2_self=_uniform_init(rng, f"smr.{modality}.w2_self", (c, mid), mid),
            b2_self=_zeros((c,)),
            w1_cross=_uniform_init(rng, f"smr.{modality}.w1_cross", (mid, c_in), c_in),
            b1_cross=_zeros((mid,)),
            w2_cross=_uniform_init(rng, f"smr.{modality}.w2_cross", (c, mid), mid),
            b2_cross=_zeros((c,)),
        )

    latent = latent_channels if latent_channels > 0 else max(1, dims.rgb_channels // 2)
    if pyramid_levels < 0:
        raise ValueError(f"pyramid levels must be non-negative, got {pyramid_levels}")
    cmc = CmcParams(
        rgb_w=_uniform_init(rng, "cmc.rgb_w", (latent, 2 * dims.rgb_channels),
                            2 * dims.rgb_channels),
        rgb_b=_zeros((latent,)),
        flow_w=_uniform_init(rng, "cmc.flow_w", (latent, 2 * dims.flow_channels),
                             2 * dims.flow_channels),
        flow_b=_zeros((latent,)),
        levels=pyramid_levels,
    )

    spatial_dim = 2 * dims.rgb_channels + 2 * dims.flow_channels
    audio_dim = 2 * dims.audio_channels
    disc_in = spatial_dim + audio_dim
    hidden = disc_hidden if disc_hidden > 0 else max(4, disc_in // 2)
    heads = HeadParams(
        verb_w=_uniform_init(rng, "head.verb_w", (dims.verb_classes, spatial_dim), spatial_dim),
        verb_b=_zeros((dims.verb_classes,)),
        noun_w=_uniform_init(rng, "head.noun_w", (dims.noun_classes, spatial_dim), spatial_dim),
        noun_b=_zeros((dims.noun_classes,)),
        audio_verb_w=_uniform_init(rng, "head.audio_verb_w", (dims.verb_classes, audio_dim),
                                   audio_dim),
        audio_verb_b=_zeros((dims.verb_classes,)),
        audio_noun_w=_uniform_init(rng, "head.audio_noun_w", (dims.noun_classes, audio_dim),
                                   audio_dim),
        audio_noun_b=_zeros((dims.noun_classes,)),
        disc_hidden_w=_uniform_init(rng, "head.disc_hidden_w", (hidden, disc_in), disc_in),
        disc_hidden_b=_zeros((hidden,)),
        disc_out_w=_uniform_init(rng, "head.disc_out_w", (2, hidden), hidden),
        disc_out_b=_zeros((2,)),
    )
    return M3emParams(smr=smr, cmc=cmc, heads=heads)


# ---------------------------------------------------------------------------
# gating


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _gate_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
              name: str) -> Tensor:
    """sigmoid(W2 relu(W1 x + b1) + b2) fused into one tape node.

    The gates run six times per sample, so the bottleneck MLP is a single op
    with a hand-derived backward instead of a four-node chain.
    """
    if x.shape != (w1.shape[1],):
        raise ShapeError(f"{name} input {x.shape} does not match W1 {w1.shape}")
    pre = w1.data @ x.data + b1.data
    hidden = np.maximum(pre, 0.0)
    z = w2.data @ hidden + b2.data
    y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    np.clip(y, _SIG_LO, _SIG_HI, out=y)
    out = Tensor(y)

    def backward(g):
        dz = g * y * (1.0 - y)
        dhidden = w2.data.T @ dz
        dpre = dhidden * (pre > 0.0)
        if x.requires_grad:
            x.accumulate_grad(w1.data.T @ dpre)
        if w1.requires_grad:
            w1.accumulate_grad(np.outer(dpre, x.data))
        if b1.requires_grad:
            b1.accumulate_grad(dpre)
        if w2.requires_grad:
            w2.accumulate_grad(np.outer(dz, hidden))
        if b2.requires_grad:
            b2.accumulate_grad(dz)

    return record_node(name, out, (x, w1, b1, w2, b2), backward)


def self_gate(pooled: Tensor, p: SmrParams) -> Tensor:
    """sigmoid(W2 relu(W1 f + b1) + b2) on a modality's own pooled descriptor."""
    return _gate_mlp(pooled, p.w1_self, p.b1_self, p.w2_self, p.b2_self, "self_gate")


def cross_gate(pooled_others: Tensor, p: SmrParams) -> Tensor:
    """Same bottleneck driven by the concatenated descriptors of the other modalities."""
    return _gate_mlp(pooled_others, p.w1_cross, p.b1_cross, p.w2_cross, p.b2_cross,
                     "cross_gate")


def channel_scale(feature: Tensor, gate: Tensor) -> Tensor:
    """Multiply every spatial position of channel ch by gate[ch]."""
    if gate.data.ndim != 1:
        raise ShapeError(f"gate must be rank 1, got {gate.shape}")
    if feature.shape[0] != gate.shape[0]:
        raise ShapeError(f"channel mismatch: feature {feature.shape} vs gate {gate.shape}")
    if feature.data.ndim == 1:
        return mul(feature, gate)
    if feature.data.ndim != 3:
        raise ShapeError(f"feature must be rank 1 or 3, got {feature.shape}")
    return mul(feature, reshape(gate, (gate.shape[0], 1, 1)))


def smr_forward(feature: Tensor, others: Sequence[Tensor], p: SmrParams) -> Tensor:
    """Concat of the self-refined and cross-refined copies: c -> 2c channels.

    ``others`` are the pooled descriptors of the remaining modalities in fixed
    rgb/flow/audio order.  A rank-1 feature is the degenerate h=w=1 case
    (pooling is the identity) and yields a rank-1 output.
    """
    if not others:
        raise ShapeError("smr_forward needs at least one other modality descriptor")
    if feature.data.ndim == 1:
        spatial = reshape(feature, (feature.shape[0], 1, 1))
        refined = smr_forward(spatial, others, p)
        return reshape(refined, (refined.shape[0],))
    pooled = global_avg_pool(feature)
    gate_self = self_gate(pooled, p)
    cross_input = others[0]
    for extra in others[1:]:
        cross_input = concat_channels(cross_input, extra)
    gate_cross = cross_gate(cross_input, p)
    return concat_channels(channel_scale(feature, gate_self),
                           channel_scale(feature, gate_cross))


# ---------------------------------------------------------------------------
# cross-modality consensus


def pearson_map(h_rgb: Tensor, h_flow: Tensor, mode: str = "centered") -> Tensor:
    """Per-position correlation of the two latent maps: (c', h, w) -> (h, w).

    ``centered`` mean-centers each position's channel vector and divides by the
    product of centered norms (true Pearson, clipped into [-1, 1]).
    ``as-written`` divides the raw dot product by the product of squared norms
    and is neither centered nor bounded.  Positions whose (centered) vector
    norm falls below 1e-12 produce 0.
    """
    if h_rgb.shape != h_flow.shape:
        raise ShapeError(f"correlation inputs differ: {h_rgb.shape} vs {h_flow.shape}")
    if h_rgb.data.ndim != 3:
        raise ShapeError(f"pearson_map expects (c, h, w), got {h_rgb.shape}")
    if mode not in PEARSON_MODES:
        raise ValueError(f"unknown pearson mode {mode!r}")

    if mode == "centered":
        u = h_rgb.data - h_rgb.data.mean(axis=0, keepdims=True)
        v = h_flow.data - h_flow.data.mean(axis=0, keepdims=True)
        dot = (u * v).sum(axis=0)
        norm_u = np.sqrt((u * u).sum(axis=0))
        norm_v = np.sqrt((v * v).sum(axis=0))
        mask = (norm_u >= _DEGENERATE_NORM) & (norm_v >= _DEGENERATE_NORM)
        denom = np.where(mask, norm_u * norm_v, 1.0)
        out = Tensor(np.clip(dot / denom, -1.0, 1.0) * mask)

        def backward(g):
            geff = g * mask
            raw = dot / denom
            sq_u = np.where(mask, norm_u * norm_u, 1.0)
            sq_v = np.where(mask, norm_v * norm_v, 1.0)
            if h_rgb.requires_grad:
                a = v / denom - raw * u / sq_u
                h_rgb.accumulate_grad(geff * (a - a.mean(axis=0, keepdims=True)))
            if h_flow.requires_grad:
                a = u / denom - raw * v / sq_v
                h_flow.accumulate_grad(geff * (a - a.mean(axis=0, keepdims=True)))

    else:
        u = h_rgb.data
        v = h_flow.data
        dot = (u * v).sum(axis=0)
        sq_u = (u * u).sum(axis=0)
        sq_v = (v * v).sum(axis=0)
        mask = (sq_u >= _DEGENERATE_NORM ** 2) & (sq_v >= _DEGENERATE_NORM ** 2)
        denom = np.where(mask, sq_u * sq_v, 1.0)
        out = Tensor((dot / denom) * mask)

        def backward(g):
            geff = g * mask
            raw = dot / denom
            safe_u = np.where(mask, sq_u, 1.0)
            safe_v = np.where(mask, sq_v, 1.0)
            if h_rgb.requires_grad:
                h_rgb.accumulate_grad(geff * (v / denom - 2.0 * raw * u / safe_u))
            if h_flow.requires_grad:
                h_flow.accumulate_grad(geff * (u / denom - 2.0 * raw * v / safe_v))

    return record_node("pearson_map", out, (h_rgb, h_flow), backward)


def consensus_map(h_rgb: Tensor, h_flow: Tensor, levels: int, mode: str = "centered") -> Tensor:
    """Sum of per-scale correlation maps, each upsampled back to full size.

    Level 0 is the input resolution; each further level halves the grid
    (saturating at 1x1).  With ``levels`` extra scales the result is bounded
    by levels+1 in centered mode.
    """
    if levels < 0:
        raise ValueError(f"pyramid levels must be non-negative, got {levels}")
    _, h, w = h_rgb.shape
    cur_rgb, cur_flow = h_rgb, h_flow
    total = upsample_to(pearson_map(cur_rgb, cur_flow, mode), h, w)
    for _ in range(levels):
        cur_rgb = downsample2x(cur_rgb)
        cur_flow = downsample2x(cur_flow)
        total = total + upsample_to(pearson_map(cur_rgb, cur_flow, mode), h, w)
    return total


def consensus_pool(feature: Tensor, consensus: Tensor) -> Tensor:
    """Residual-weighted spatial average: mean over (i,j) of (1 + C[i,j]) * F[:,i,j]."""
    if feature.data.ndim != 3 or consensus.data.ndim != 2:
        raise ShapeError(
            f"consensus_pool expects (c,h,w) and (h,w), got {feature.shape}, {consensus.shape}")
    if feature.shape[1:] != consensus.shape:
        raise ShapeError(
            f"spatial mismatch: feature {feature.shape} vs consensus {consensus.shape}")
    weights = reshape(consensus + 1.0, (1,) + consensus.shape)
    return global_avg_pool(mul(feature, weights))


# ---------------------------------------------------------------------------
# heads, fusion, losses


@dataclass
class Scores:
    """Per-sample class scores for the two recognition heads."""

    verb: Tensor
    noun: Tensor


@dataclass
class FusedScores:
    s1: Scores
    s2: Scores
    fused: Scores


@dataclass
class ForwardResult:
    scores: FusedScores
    domain_logits: Tensor
    consensus: Tensor


def late_fuse(s1: Scores, s2: Scores) -> Scores:
    """Weighted average with weights 1 (spatial score) and 0.5 (audio score)."""
    if s1.verb.shape != s2.verb.shape or s1.noun.shape != s2.noun.shape:
        raise ShapeError(
            f"class count mismatch: ({s1.verb.shape}, {s1.noun.shape}) vs "
            f"({s2.verb.shape}, {s2.noun.shape})")
    return Scores(verb=(s1.verb + s2.verb * 0.5) / 1.5,
                  noun=(s1.noun + s2.noun * 0.5) / 1.5)


def discriminator_forward(feature: Tensor, heads: HeadParams, lambda_d: float,
                          adversarial: bool = True) -> Tensor:
    """Two-logit source/target discriminator behind a gradient-reversal layer.

    ``adversarial=False`` skips the reversal (plain gradients), used by the
    finite-difference checker where reversed gradients cannot match the oracle
    by construction.
    """
    if feature.shape != (heads.disc_hidden_w.shape[1],):
        raise ShapeError(
            f"discriminator input {feature.shape} does not match "
            f"W {heads.disc_hidden_w.shape}")
    x = grad_reverse(feature, lambda_d) if adversarial else feature
    hidden = relu(affine(x, heads.disc_hidden_w, heads.disc_hidden_b))
    return affine(hidden, heads.disc_out_w, heads.disc_out_b)


def combined_loss(loss_y: Tensor, loss_d: Tensor, lambda_y: float, lambda_d: float) -> Tensor:
    """Weighted sum of the classification and adversarial losses."""
    if not (np.isfinite(loss_y.item()) and np.isfinite(loss_d.item())):
        raise ValueError(
            f"losses must be finite, got {loss_y.item()} and {loss_d.item()}")
    return loss_y * lambda_y + loss_d * lambda_d


def classification_loss(scores: Scores, verb: int, noun: int) -> Tensor:
    """Sum of the verb and noun cross-entropies for one labeled sample."""
    return softmax_xent(scores.verb, verb) + softmax_xent(scores.noun, noun)


def model_forward(features: dict[str, Tensor], params: M3emParams, *,
                  pearson_mode: str = "centered", ablation: str = "full",
                  lambda_d: float = 1.0, adversarial: bool = True) -> ForwardResult:
    """Full pipeline for one sample.

    ``features`` holds rank-3 rgb/flow maps sharing (h, w) and a rank-1 audio
    vector.  Ablations: ``baseline`` replaces gating by feature doubling and
    the consensus map by zeros; ``smr``/``cmc`` enable exactly one sub-module.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    for name in MODALITY_ORDER:
        if name not in features:
            raise ShapeError(f"missing modality {name!r}")
    rgb, flow = features["rgb"], features["flow"]
    if rgb.shape[1:] != flow.shape[1:]:
        raise ShapeError(f"rgb/flow spatial mismatch: {rgb.shape} vs {flow.shape}")
    gates_on = ablation in ("full", "smr")
    consensus_on = ablation in ("full", "cmc")

    pooled = {}
    for name in MODALITY_ORDER:
        f = features[name]
        pooled[name] = global_avg_pool(f) if f.data.ndim == 3 else f

    refined = {}
    for name in MODALITY_ORDER:
        f = features[name]
        if gates_on:
            others = [pooled[m] for m in MODALITY_ORDER if m != name]
            refined[name] = smr_forward(f, others, params.smr[name])
        else:
            refined[name] = concat_channels(f, f)

    _, h, w = rgb.shape
    if consensus_on:
        latent_rgb = conv1x1(refined["rgb"], params.cmc.rgb_w, params.cmc.rgb_b)
        latent_flow = conv1x1(refined["flow"], params.cmc.flow_w, params.cmc.flow_b)
        consensus = consensus_map(latent_rgb, latent_flow, params.cmc.levels, pearson_mode)
    else:
        consensus = Tensor(np.zeros((h, w)))

    pooled_rgb = consensus_pool(refined["rgb"], consensus)
    pooled_flow = consensus_pool(refined["flow"], consensus)
    pooled_audio = refined["audio"]

    spatial = concat_channels(pooled_rgb, pooled_flow)
    s1 = Scores(verb=affine(spatial, params.heads.verb_w, params.heads.verb_b),
                noun=affine(spatial, params.heads.noun_w, params.heads.noun_b))
    s2 = Scores(verb=affine(pooled_audio, params.heads.audio_verb_w, params.heads.audio_verb_b),
                noun=affine(pooled_audio, params.heads.audio_noun_w, params.heads.audio_noun_b))
    fused = late_fuse(s1, s2)

    domain_logits = discriminator_forward(concat_channels(spatial, pooled_audio),
                                          params.heads, lambda_d, adversarial)
    return ForwardResult(scores=FusedScores(s1=s1, s2=s2, fused=fused),
                         domain_logits=domain_logits, consensus=consensus)


# ---------------------------------------------------------------------------
# ensembling (evaluation only, no gradients)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def ensemble_scores(score_sets: Sequence[Scores], weights: Sequence[float]) -> Scores:
    """Weighted average of softmax-normalized scores, independently per head."""
    if len(score_sets) == 0:
        raise ValueError("ensemble needs at least one model's scores")
    if len(score_sets) != len(weights):
        raise ValueError(f"{len(score_sets)} score sets but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("ensemble weights must be non-negative")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("ensemble weights must not all be zero")
    verb_shape = score_sets[0].verb.shape
    noun_shape = score_sets[0].noun.shape
    verb = np.zeros(verb_shape)
    noun = np.zeros(noun_shape)
    for scores, weight in zip(score_sets, weights):
        if scores.verb.shape != verb_shape or scores.noun.shape != noun_shape:
            raise ShapeError("ensemble class counts differ across models")
        verb += (weight / total) * _softmax(scores.verb.data)
        noun += (weight / total) * _softmax(scores.noun.data)
    return Scores(verb=Tensor(verb), noun=Tensor(noun))
