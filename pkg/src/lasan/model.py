"""The lead-aware spatial attention network.

Pipeline for a batch of (B, 8, 2500) signals:

1. per-lead temporal encoder: four conv -> batchnorm -> relu -> maxpool(2)
   blocks applied to each lead separately, then global average pooling,
   giving (B, 8, D) lead tokens;
2. anatomical position encoding: a learned embedding per lead plus one per
   lead group, added to the tokens;
3. a pre-norm transformer encoder over the 8 lead tokens;
4. a single-head attention aggregator with a learned query, giving per-lead
   importance weights (B, 8) and a pooled (B, D) representation;
5. an MLP head D -> hidden -> n_out with softmax (3-class) or sigmoid
   (binary, one logit).
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass, fields

import numpy as np

from .dataio import N_LEADS
from .errors import ConfigurationError, DimensionError, NumericError
from .numerics import ops
from .numerics.nn import BatchNorm1d, Conv1d, LayerNorm, Linear, Module, Parameter, TransformerEncoderLayer
from .numerics.tensor import Tensor

# limb {I, II}, right precordial {V1..V3}, lateral precordial {V4..V6}
DEFAULT_LEAD_GROUPS = (0, 0, 1, 1, 1, 2, 2, 2)


@dataclass(frozen=True)
class LasanSpec:
    leads: int = N_LEADS
    conv_channels: tuple = (32, 64, 128, 256)
    kernel: int = 15
    pool_stride: int = 2
    embed_dim: int = 256
    transformer_layers: int = 3
    heads: int = 4
    ffn_dim: int = 512
    transformer_dropout: float = 0.1
    head_hidden: int = 128
    head_dropout: float = 0.25
    n_classes: int = 3
    lead_groups: tuple = DEFAULT_LEAD_GROUPS
    shared_encoder: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "lead_groups", tuple(int(g) for g in self.lead_groups))
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}", module="lasan")
        if any(b <= a for a, b in zip(self.conv_channels, self.conv_channels[1:])):
            raise ConfigurationError(f"conv_channels must increase strictly: {self.conv_channels}", module="lasan")
        if self.conv_channels[-1] != self.embed_dim:
            raise ConfigurationError("last conv channel count must equal embed_dim", module="lasan")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel size must be odd for same padding", module="lasan")
        if self.pool_stride != 2:
            raise ConfigurationError("only stride-2 pooling is supported", module="lasan")
        if self.n_classes not in (2, 3):
            raise ConfigurationError("n_classes must be 2 or 3", module="lasan")
        if len(self.lead_groups) != self.leads or min(self.lead_groups) < 0:
            raise ConfigurationError("every lead must be mapped to a group", module="lasan")

    @property
    def n_groups(self):
        return max(self.lead_groups) + 1

    @property
    def n_out(self):
        return 1 if self.n_classes == 2 else self.n_classes

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            if k not in types:
                raise ConfigurationError(f"unknown LasanSpec key {k!r}", module="lasan")
            default = getattr(cls, k, None)
            if k in ("conv_channels", "lead_groups"):
                kwargs[k] = tuple(int(x) for x in str(v).split(",") if x != "")
            elif k == "shared_encoder":
                kwargs[k] = str(v).strip().lower() in ("1", "true", "yes")
            elif isinstance(default, float):
                kwargs[k] = float(v)
            else:
                kwargs[k] = int(v)
        return cls(**kwargs)


@dataclass(frozen=True)
class LeadImportance:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (N_LEADS,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-5:
            raise NumericError(f"invalid lead importance {w}", module="lasan")
        object.__setattr__(self, "weights", w)


@contextmanager
def stage(name, module="lasan"):
    """Re-raise numeric failures with the pipeline stage that produced them."""
    try:
        yield
    except NumericError as exc:
        raise NumericError(f"stage {name}: {exc.args[0]}", module=module) from exc


class ConvBlock(Module):
    def __init__(self, c_in, c_out, kernel, rng):
        super().__init__()
        self.conv = Conv1d(c_in, c_out, kernel, rng, padding=(kernel - 1) // 2)
        self.bn = BatchNorm1d(c_out)

    def forward(self, x):
        return ops.maxpool1d(ops.relu(self.bn(self.conv(x))))


class TemporalEncoder(Module):
    """Conv stack mapping (N, 1, L) single-lead signals to (N, C_last)."""

    def __init__(self, channels, kernel, rng):
        super().__init__()
        self.n_blocks = len(channels)
        c_in = 1
        for i, c in enumerate(channels):
            setattr(self, f"block{i}", ConvBlock(c_in, c, kernel, rng))
            c_in = c

    def forward(self, x):
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}")(x)
        return ops.global_avg_pool(x)


def add_position_encoding(features, lead_embed, group_embed, lead_groups):
    """``features[l] + lead_embed[l] + group_embed[group(l)]`` for every lead row."""
    groups = np.asarray(lead_groups, dtype=np.int64)
    if groups.shape != (features.shape[-2],) or groups.min() < 0 or groups.max() >= group_embed.shape[0]:
        raise ConfigurationError(f"lead_groups {tuple(lead_groups)} do not map every lead to a group", module="lasan")
    return ops.add(ops.add(features, lead_embed), ops.embedding(group_embed, groups))


class LeadAggregator(Module):
    """Single-head attention pooling with a learned query over lead tokens."""

    def __init__(self, dim, rng):
        super().__init__()
        self.query = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, 1)).astype(np.float32))
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.dim = dim

    def forward(self, tokens):
        return aggregate(tokens, self.query, self.key, self.value)


def aggregate(tokens, query, key, value):
    """Return ``(weights (B, T), pooled (B, D))``.

    ``scores[l] = <query, key(tokens[l])> / sqrt(D)``, weights are their
    softmax over leads and the pooled vector is the weighted sum of
    ``value(tokens[l])``.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = ops.reshape(tokens, (1, *tokens.shape))
    bsz, t, d = tokens.shape
    q = query if query.ndim == 2 else ops.reshape(query, (d, 1))
    scores = ops.mul(ops.reshape(ops.matmul(key(tokens), q), (bsz, t)), 1.0 / math.sqrt(d))
    weights = ops.softmax(scores, axis=-1)
    pooled = ops.reshape(ops.matmul(ops.reshape(weights, (bsz, 1, t)), value(tokens)), (bsz, d))
    if squeeze:
        weights = ops.reshape(weights, (t,))
        pooled = ops.reshape(pooled, (d,))
    return weights, pooled


class ClassifierHead(Module):
    def __init__(self, dim, hidden, n_out, dropout, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)
        self.dropout = dropout
        self.n_out = n_out

    def forward(self, h, rng=None):
        h = ops.relu(self.fc1(h))
        h = ops.dropout(h, self.dropout, rng, self.training)
        logits = self.fc2(h)
        if self.n_out == 1:
            return ops.sigmoid(ops.reshape(logits, logits.shape[:-1]))
        return ops.softmax(logits, axis=-1)


class LASAN(Module):
    """Standalone network; ``forward`` returns ``(probabilities, lead weights)``."""

    needs_signal = True
    needs_fm = False

    def __init__(self, spec=None, seed=0):
        super().__init__()
        spec = spec or LasanSpec()
        self.spec = spec
        rng = np.random.default_rng(seed)
        d = spec.embed_dim
        if spec.shared_encoder:
            self.encoder = TemporalEncoder(spec.conv_channels, spec.kernel, rng)
        else:
            for lead in range(spec.leads):
                setattr(self, f"encoder{lead}", TemporalEncoder(spec.conv_channels, spec.kernel, rng))
        self.lead_embed = Parameter(rng.normal(0.0, 0.02, (spec.leads, d)).astype(np.float32))
        self.group_embed = Parameter(rng.normal(0.0, 0.02, (spec.n_groups, d)).astype(np.float32))
        for i in range(spec.transformer_layers):
            setattr(self, f"layer{i}", TransformerEncoderLayer(d, spec.heads, spec.ffn_dim, spec.transformer_dropout, rng))
        self.final_norm = LayerNorm(d)
        self.aggregator = LeadAggregator(d, rng)
        self.head = ClassifierHead(d, spec.head_hidden, spec.n_out, spec.head_dropout, rng)

    @property
    def n_classes(self):
        return self.spec.n_classes

    def per_lead_encode(self, x):
        """(B, 8, L) -> (B, 8, D), each lead through the temporal encoder."""
        bsz, leads, length = x.shape
        if leads != self.spec.leads:
            raise DimensionError(f"expected {self.spec.leads} leads, got {leads}", module="lasan")
        if self.spec.shared_encoder:
            feats = self.encoder(ops.reshape(x, (bsz * leads, 1, length)))
            return ops.reshape(feats, (bsz, leads, self.spec.embed_dim))
        rows = []
        for lead in range(leads):
            enc = getattr(self, f"encoder{lead}")
            rows.append(ops.reshape(enc(ops.reshape(x[:, lead : lead + 1, :], (bsz, 1, length))), (bsz, 1, -1)))
        return ops.concat(rows, axis=1)

    def contextualize(self, tokens, rng=None):
        for i in range(self.spec.transformer_layers):
            tokens = getattr(self, f"layer{i}")(tokens, rng)
        return self.final_norm(tokens)

    def embed(self, x, rng=None):
        """Everything up to the aggregator: returns ``(weights, pooled)``."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim == 2:
            x = ops.reshape(x, (1, *x.shape))
        with stage("per_lead_encode"):
            feats = self.per_lead_encode(x)
        with stage("position_encoding"):
            tokens = add_position_encoding(feats, self.lead_embed, self.group_embed, self.spec.lead_groups)
        with stage("transformer"):
            tokens = self.contextualize(tokens, rng)
        with stage("aggregate"):
            return self.aggregator(tokens)

    def forward(self, x, x_fm=None, rng=None):
        weights, pooled = self.embed(x, rng)
        with stage("classifier_head"):
            probs = self.head(pooled, rng)
        return probs, weights


def parameter_count(spec):
    """Trainable parameter count of a LASAN built from ``spec`` (closed form)."""
    d, k = spec.embed_dim, spec.kernel
    enc = 0
    c_in = 1
    for c in spec.conv_channels:
        enc += c * c_in * k + c + 2 * c
        c_in = c
    if not spec.shared_encoder:
        enc *= spec.leads
    pos = spec.leads * d + spec.n_groups * d
    layer = 2 * 2 * d + 4 * (d * d + d) + (d * spec.ffn_dim + spec.ffn_dim) + (spec.ffn_dim * d + d)
    trans = spec.transformer_layers * layer + 2 * d
    agg = d + 2 * (d * d + d)
    head = d * spec.head_hidden + spec.head_hidden + spec.head_hidden * spec.n_out + spec.n_out
    return enc + pos + trans + agg + head
