"""EEG encoder with a song classifier and a masked teacher-prediction decoder.

Shapes at the default configuration::

    X (B, 128, 375) -> patches (B*384, 1, 125) -> conv stack -> (B, 384, 128)
      -> linear -> (B, 384, 512) + channel/second embeddings, [CLS] prepended
      -> 2 pre-norm blocks -> h_cls (B, 512) -> LN -> 512-256-10 classifier
    teacher (B, N_M, d_t) -> projection / mask embedding + positions
      -> concat with encoder states -> 2 blocks -> (B, N_M, 128) logits

Everything whose name starts with ``decoder.`` is pretraining-only and is
dropped by ``strip_decoder``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import functional as F
from .nn.modules import (BatchNorm1d, Conv1d, GroupNorm, LayerNorm, Linear, Module,
                         Parameter, TransformerBlock)
from .nn.tensor import Tensor, add, concat, default_dtype

TEACHER_KINDS = ("muq", "surprisal", "entropy")
DECODER_PREFIX = "decoder."


@dataclass
class ModelConfig:
    channels: int = 128
    seconds: int = 3
    rate: int = 125
    embed_dim: int = 512
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 8
    mlp_ratio: float = 4.0
    classes: int = 10
    classifier_hidden: int = 256
    teacher_kind: str = "surprisal"
    teacher_len: int = 150
    teacher_dim: int = 1
    vocab: int = 128
    mask_ratio: float = 0.5
    w_class: float = 1.0
    w_mask: float = 0.1
    dropout: float = 0.1
    # temporal encoder geometry (a declared choice; only output shapes are fixed)
    conv_channels: tuple = (32, 64, 128)
    conv_kernels: tuple = (7, 5, 5)
    conv_strides: tuple = (3, 2, 2)
    groups: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.conv_kernels = tuple(self.conv_kernels)
        self.conv_strides = tuple(self.conv_strides)
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.teacher_kind not in TEACHER_KINDS:
            raise ValueError(f"teacher_kind must be one of {TEACHER_KINDS}")
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ValueError("conv geometry lists must have equal length")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        length = self.rate
        for k, s in zip(self.conv_kernels, self.conv_strides):
            length = (length - k) // s + 1
            if length < 1:
                raise ValueError(f"conv stack collapses a {self.rate}-sample patch")

    @property
    def patch_dim(self):
        return self.conv_channels[-1]

    @property
    def n_tokens(self):
        return self.channels * self.seconds

    def to_dict(self):
        d = asdict(self)
        for k in ("conv_channels", "conv_kernels", "conv_strides"):
            d[k] = list(d[k])
        return d


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class TemporalPatchEmbed(Module):
    """Per (channel, second) patch: conv -> GroupNorm -> GELU (x3), mean over time, linear."""

    def __init__(self, cfg, rng):
        self.convs = []
        self.norms = []
        c_in = 1
        for c_out, k, s in zip(cfg.conv_channels, cfg.conv_kernels, cfg.conv_strides):
            self.convs.append(Conv1d(c_in, c_out, k, s, rng))
            self.norms.append(GroupNorm(cfg.groups, c_out))
            c_in = c_out
        self.proj = Linear(cfg.patch_dim, cfg.embed_dim, rng)
        self.cfg = cfg

    def forward(self, x):
        cfg = self.cfg
        B = x.shape[0]
        if x.shape[1:] not in ((cfg.channels, cfg.seconds, cfg.rate), (cfg.channels, cfg.seconds * cfg.rate)):
            raise ValueError(f"EEG input shape {x.shape[1:]} does not match config "
                             f"({cfg.channels}, {cfg.seconds}, {cfg.rate})")
        h = x.reshape(B * cfg.n_tokens, 1, cfg.rate)
        for conv, norm in zip(self.convs, self.norms):
            h = F.gelu(norm(conv(h)))
        h = h.mean(axis=2)
        return self.proj(h).reshape(B, cfg.n_tokens, cfg.embed_dim)


class ClassifierHead(Module):
    """LN -> Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, cfg, rng):
        self.norm = LayerNorm(cfg.embed_dim)
        self.fc1 = Linear(cfg.embed_dim, cfg.classifier_hidden, rng)
        self.bn = BatchNorm1d(cfg.classifier_hidden)
        self.fc2 = Linear(cfg.classifier_hidden, cfg.classes, rng)

    def forward(self, h):
        return self.fc2(F.relu(self.bn(self.fc1(self.norm(h)))))


class TeacherDecoder(Module):
    def __init__(self, cfg, rng):
        self.mask_embed = Parameter(_normal(rng, (cfg.embed_dim,), cfg.init_std))
        self.pos_embed = Parameter(_normal(rng, (cfg.teacher_len, cfg.embed_dim), cfg.init_std))
        self.teacher_proj = Linear(cfg.teacher_dim, cfg.embed_dim, rng)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, cfg.dropout)
                       for _ in range(cfg.decoder_layers)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.out = Linear(cfg.embed_dim, cfg.vocab, rng)
        self.cfg = cfg

    def inputs(self, teacher_raw, mask):
        """u_i = mask embedding where masked, else projected teacher value; plus positions."""
        cfg = self.cfg
        raw = teacher_raw if isinstance(teacher_raw, Tensor) else Tensor(np.asarray(teacher_raw, dtype=default_dtype()))
        if raw.ndim == 2:
            raw = raw.reshape(raw.shape[0], raw.shape[1], 1)
        if raw.shape[1:] != (cfg.teacher_len, cfg.teacher_dim):
            raise ValueError(f"teacher input {raw.shape[1:]} != ({cfg.teacher_len}, {cfg.teacher_dim})")
        u = F.where_rows(mask, self.mask_embed, self.teacher_proj(raw))
        return u + self.pos_embed

    def forward(self, states, teacher_raw, mask):
        u = self.inputs(teacher_raw, mask)
        h = concat([states, u], axis=1)
        for blk in self.blocks:
            h = blk(h)
        n = self.cfg.teacher_len
        h = h[:, h.shape[1] - n:, :]
        return self.out(self.norm(h))


class EegModel(Module):
    def __init__(self, cfg, rng, with_decoder=True):
        self.cfg = cfg
        self.patch = TemporalPatchEmbed(cfg, rng)
        self.ch_embed = Parameter(_normal(rng, (cfg.channels, cfg.embed_dim), cfg.init_std))
        self.sec_embed = Parameter(_normal(rng, (cfg.seconds, cfg.embed_dim), cfg.init_std))
        self.cls_token = Parameter(_normal(rng, (cfg.embed_dim,), cfg.init_std))
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, cfg.dropout)
                       for _ in range(cfg.encoder_layers)]
        self.head = ClassifierHead(cfg, rng)
        self.decoder = TeacherDecoder(cfg, rng) if with_decoder else None
        self._ch_idx = np.repeat(np.arange(cfg.channels), cfg.seconds)
        self._sec_idx = np.tile(np.arange(cfg.seconds), cfg.channels)

    def set_dropout_rngs(self, encoder_rng, decoder_rng=None):
        for blk in self.blocks:
            blk.rng = encoder_rng
        if self.decoder is not None:
            for blk in self.decoder.blocks:
                blk.rng = decoder_rng

    # -- pipeline pieces
    def embed_patches(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))
        return self.patch(x)

    def assemble(self, tokens):
        """tokens (B, C*S, D) -> (B, 1 + C*S, D) with identity embeddings and [CLS]."""
        B, _, D = tokens.shape
        ident = F.embedding(self.ch_embed, self._ch_idx) + F.embedding(self.sec_embed, self._sec_idx)
        z = tokens + ident
        cls = add(Tensor(np.zeros((B, 1, D), dtype=tokens.dtype)), self.cls_token.reshape(1, 1, D))
        return concat([cls, z], axis=1)

    def encode(self, seq):
        for blk in self.blocks:
            seq = blk(seq)
        return seq[:, 0, :], seq

    def classify(self, h_cls):
        return self.head(h_cls)

    def forward(self, x, teacher_raw=None, mask=None):
        """Returns dict with ``class_logits``, ``h_cls`` and, if a teacher is given, ``teacher_logits``."""
        h_cls, states = self.encode(self.assemble(self.embed_patches(x)))
        out = {"h_cls": h_cls, "class_logits": self.classify(h_cls)}
        if teacher_raw is not None:
            if self.decoder is None:
                raise ValueError("model was built without a teacher decoder")
            out["teacher_logits"] = self.decoder(states, teacher_raw, mask)
        return out


def predict_labels(class_logits):
    """Argmax; ties resolve to the lowest class index."""
    z = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    return z.argmax(axis=-1)


def sample_mask(n, ratio, rng, batch=None):
    """Boolean mask with exactly round(ratio * n) True entries (per row if ``batch``)."""
    k = int(np.floor(ratio * n + 0.5))
    rows = 1 if batch is None else batch
    mask = np.zeros((rows, n), dtype=bool)
    for r in range(rows):
        mask[r, rng.permutation(n)[:k]] = True
    return mask[0] if batch is None else mask


def pretrain_loss(outputs, labels, teacher_disc, mask, w_class=1.0, w_mask=0.1):
    """w_class * CE(class) + w_mask * mean CE over masked teacher positions.

    Returns ``(total, parts)`` where parts holds float values of each term;
    with an empty mask the masked term is left out.
    """
    l_c = F.cross_entropy(outputs["class_logits"], np.asarray(labels))
    total = l_c * w_class
    parts = {"loss_class": float(l_c.data)}
    mask = np.asarray(mask, dtype=bool)
    if mask.any():
        idx = np.nonzero(mask)
        l_m = F.cross_entropy(outputs["teacher_logits"][idx], np.asarray(teacher_disc)[idx])
        total = total + l_m * w_mask
        parts["loss_mask"] = float(l_m.data)
    parts["loss"] = float(total.data)
    return total, parts


def classification_loss(outputs, labels):
    l_c = F.cross_entropy(outputs["class_logits"], np.asarray(labels))
    return l_c, {"loss_class": float(l_c.data), "loss": float(l_c.data)}


def strip_decoder(state):
    """Drop every pretraining-only tensor from a state dict."""
    return {k: v for k, v in state.items() if not k.startswith(DECODER_PREFIX)}


def build_model(cfg, seed_or_rng, with_decoder=True):
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return EegModel(cfg, rng, with_decoder)


def config_from_dict(d):
    known = {f for f in ModelConfig.__dataclass_fields__}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown model config keys: {sorted(extra)}")
    return ModelConfig(**d)


__all__ = ["ModelConfig", "EegModel", "build_model", "sample_mask", "pretrain_loss",
           "classification_loss", "strip_decoder", "predict_labels", "config_from_dict",
           "TEACHER_KINDS"]
