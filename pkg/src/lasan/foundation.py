"""Foundation-encoder plumbing: stub encoders, transfer strategies, integrations.

Real ECG foundation models are not bundled. Two small conv encoders stand in
for them behind the same contract (8 x 2500 signal at 500 Hz in, E-dim
embedding out): one with seeded random weights and one pretrained with a
self-supervised pretext task on a synthetic corpus.
"""
import enum
import functools
from dataclasses import dataclass

import numpy as np

from .dataio import N_LEADS
from .errors import ConfigurationError
from .model import LASAN, ClassifierHead, LasanSpec, LeadAggregator
from .numerics import ops
from .numerics.nn import Conv1d, Linear, Module
from .numerics.tensor import Tensor, Trace
from .trainer import Adam, TrainConfig, clip_grad_norm, focal_loss, train


class EncoderKind(enum.Enum):
    RANDOM_FROZEN = "random_frozen"
    PRETEXT_PRETRAINED = "pretext_pretrained"


class StrategyKind(enum.Enum):
    LINEAR_PROBE = "linear_probe"
    FINE_TUNE = "fine_tune"
    PROBE_THEN_FINE_TUNE = "probe_then_fine_tune"


class IntegrationKind(enum.Enum):
    STANDALONE = "standalone"
    LASAN_HEAD = "lasan_head"
    HYBRID = "hybrid"


def _enum(cls, value):
    if isinstance(value, cls):
        return value
    try:
        return cls[str(value).upper()]
    except KeyError:
        names = ", ".join(m.name for m in cls)
        raise ConfigurationError(f"unknown {cls.__name__} {value!r} (choose from {names})", module="foundation") from None


class StubEncoder(Module):
    """Three strided convs (8 -> 16 -> 32 -> E channels, stride 4) with ReLU, then time-average."""

    def __init__(self, dim, rng, kernel=7, stride=4):
        super().__init__()
        pad = kernel // 2
        self.conv0 = Conv1d(N_LEADS, 16, kernel, rng, stride=stride, padding=pad)
        self.conv1 = Conv1d(16, 32, kernel, rng, stride=stride, padding=pad)
        self.conv2 = Conv1d(32, dim, kernel, rng, stride=stride, padding=pad)
        self.dim = dim

    def forward(self, x):
        h = ops.relu(self.conv0(x))
        h = ops.relu(self.conv1(h))
        h = ops.relu(self.conv2(h))
        return ops.global_avg_pool(h)


class EncoderHandle:
    """A named encoder with a fixed embedding size and a trainable switch."""

    def __init__(self, name, module, kind=None, seed=None):
        self.name = name
        self.module = module
        self.kind = kind
        self.seed = seed
        self.dim = module.dim
        self.trainable = False

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.module.set_trainable(self._trainable)

    def embed(self, x_fm):
        """(B, 8, 2500) or (8, 2500) foundation input -> (B, E) or (E,) embedding."""
        x = x_fm if isinstance(x_fm, Tensor) else Tensor(np.asarray(x_fm, dtype=np.float32))
        single = x.ndim == 2
        if single:
            x = ops.reshape(x, (1, *x.shape))
        h = self.module(x)
        return ops.reshape(h, (self.dim,)) if single else h

    def __repr__(self):
        return f"EncoderHandle({self.name!r}, E={self.dim}, trainable={self.trainable})"


@dataclass(frozen=True)
class PretextConfig:
    """Settings for the masked-lead pretext pretraining of the stub encoder."""

    patients_per_class: int = 24
    epochs: int = 6
    batch_size: int = 64
    lr: float = 3e-3
    corpus_seed: int = 9001


def _pretext_corpus(cfg):
    from .synth import SynthConfig, corpus_dataset

    ds = corpus_dataset(SynthConfig(patients_per_class=cfg.patients_per_class, ecgs_per_patient=(1, 1), seed=cfg.corpus_seed))
    return ds.x_fm


@functools.lru_cache(maxsize=8)
def _pretrained_state(seed, dim, cfg):
    rng = np.random.default_rng([seed, dim])
    enc = StubEncoder(dim, rng)
    probe = Linear(dim, N_LEADS, rng)
    x = _pretext_corpus(cfg)
    n = len(x)
    params = enc.parameters() + probe.parameters()
    opt = Adam(params)
    for _ in range(cfg.epochs):
        # every record appears once per masked lead
        rec_idx = np.repeat(np.arange(n), N_LEADS)
        lead_idx = np.tile(np.arange(N_LEADS), n)
        order = rng.permutation(len(rec_idx))
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            batch = x[rec_idx[sel]].copy()
            batch[np.arange(len(sel)), lead_idx[sel], :] = 0.0
            for p in params:
                p.grad = None
            with Trace() as tr:
                probs = ops.softmax(probe(enc(Tensor(batch))), axis=-1)
                loss = focal_loss(probs, lead_idx[sel], gamma=0.0)
            tr.backward(loss)
            clip_grad_norm(params, 1.0)
            opt.step(cfg.lr)
    return enc.state_dict()


def stub_encoder(kind, seed=0, dim=64, pretext=None):
    """Build a stub foundation encoder (frozen on return)."""
    kind = _enum(EncoderKind, kind)
    if dim < 16:
        raise ConfigurationError(f"embedding size {dim} < 16", module="foundation")
    enc = StubEncoder(dim, np.random.default_rng([seed, dim]))
    if kind is EncoderKind.PRETEXT_PRETRAINED:
        enc.load_state_dict(_pretrained_state(int(seed), int(dim), pretext or PretextConfig()))
    return EncoderHandle(kind.value, enc, kind, seed)


ENCODERS = {k.value: functools.partial(stub_encoder, k) for k in EncoderKind}


def encoder_from_registry(name, seed=0, dim=64):
    if name not in ENCODERS:
        raise ConfigurationError(f"unknown encoder {name!r}; registered: {sorted(ENCODERS)}", module="foundation")
    return ENCODERS[name](seed=seed, dim=dim)


# ---------------------------------------------------------------- integrations


def gated_fuse(h_lasan, h_fm, proj, gate):
    """``g * h_lasan + (1 - g) * proj(h_fm)`` with ``g = sigmoid(gate([h_lasan ; proj(h_fm)]))``.

    Returns ``(fused, g)``; the gate is elementwise over the LASAN width.
    """
    p_fm = proj(h_fm)
    if p_fm.shape != h_lasan.shape:
        raise ConfigurationError(f"projected embedding {p_fm.shape} does not match {h_lasan.shape}", module="foundation")
    g = ops.sigmoid(gate(ops.concat([h_lasan, p_fm], axis=-1)))
    fused = ops.add(ops.mul(g, h_lasan), ops.mul(ops.sub(1.0, g), p_fm))
    return fused, g


class LinearProbeModel(Module):
    """Foundation encoder followed by a single linear classification layer."""

    needs_signal = False
    needs_fm = True

    def __init__(self, handle, n_classes=3, seed=0):
        super().__init__()
        self.handle = handle
        self.fm = handle.module
        self.n_classes = n_classes
        n_out = 1 if n_classes == 2 else n_classes
        self.probe = Linear(handle.dim, n_out, np.random.default_rng([seed, 1]))

    def forward(self, x, x_fm, rng=None):
        logits = self.probe(self.handle.embed(x_fm))
        if self.n_classes == 2:
            return ops.sigmoid(ops.reshape(logits, logits.shape[:-1])), None
        return ops.softmax(logits, axis=-1), None


class PseudoLeadHead(Module):
    """Token projection, LASAN aggregator and classification head for a flat embedding."""

    def __init__(self, dim, spec, rng):
        super().__init__()
        self.token_proj = Linear(dim // N_LEADS, spec.embed_dim, rng)
        self.aggregator = LeadAggregator(spec.embed_dim, rng)
        self.head = ClassifierHead(spec.embed_dim, spec.head_hidden, spec.n_out, spec.head_dropout, rng)

    def forward(self, h, rng=None):
        tokens = self.token_proj(ops.reshape(h, (h.shape[0], N_LEADS, h.shape[1] // N_LEADS)))
        weights, pooled = self.aggregator(tokens)
        return self.head(pooled, rng), weights


class LasanHeadModel(Module):
    """Embedding split into 8 pseudo-lead tokens of E/8, projected to D, then LASAN aggregator + head."""

    needs_signal = False
    needs_fm = True

    def __init__(self, handle, spec, seed=0):
        super().__init__()
        if handle.dim % N_LEADS:
            raise ConfigurationError(f"embedding size {handle.dim} not divisible by {N_LEADS}", module="foundation")
        self.handle = handle
        self.fm = handle.module
        self.spec = spec
        self.lasan_head = PseudoLeadHead(handle.dim, spec, np.random.default_rng([seed, 2]))

    @property
    def n_classes(self):
        return self.spec.n_classes

    def forward(self, x, x_fm, rng=None):
        return self.lasan_head(self.handle.embed(x_fm), rng)


class GatedFusion(Module):
    """Starts close to the LASAN branch alone and learns how much of the encoder to admit.

    Raw encoder embeddings are several times larger than LASAN's pooled
    features, so a plain init lets the weaker branch swamp the fused vector.
    """

    def __init__(self, fm_dim, dim, rng, gate_bias=2.0):
        super().__init__()
        self.proj = Linear(fm_dim, dim, rng)
        self.proj.weight.data[:] = 0
        self.gate = Linear(2 * dim, dim, rng)
        self.gate.bias.data[:] = gate_bias

    def forward(self, h_lasan, h_fm):
        return gated_fuse(h_lasan, h_fm, self.proj, self.gate)


class HybridModel(Module):
    """LASAN branch and foundation branch fused by an elementwise gate before the LASAN head."""

    needs_signal = True
    needs_fm = True

    def __init__(self, handle, spec, seed=0):
        super().__init__()
        self.handle = handle
        self.lasan = LASAN(spec, seed)
        self.fm = handle.module
        self.fusion = GatedFusion(handle.dim, spec.embed_dim, np.random.default_rng([seed, 3]))
        self.spec = spec

    @property
    def n_classes(self):
        return self.spec.n_classes

    def forward(self, x, x_fm, rng=None):
        weights, h_lasan = self.lasan.embed(x, rng)
        h_fm = self.handle.embed(x_fm)
        fused, _ = self.fusion(h_lasan, h_fm)
        return self.lasan.head(fused, rng), weights


def build_integration(kind, encoder=None, spec=None, seed=0):
    kind = _enum(IntegrationKind, kind)
    spec = spec or LasanSpec()
    if kind is IntegrationKind.STANDALONE:
        if encoder is not None:
            raise ConfigurationError("STANDALONE integration does not take an encoder", module="foundation")
        return LASAN(spec, seed)
    if encoder is None:
        raise ConfigurationError(f"{kind.name} integration needs an encoder", module="foundation")
    if kind is IntegrationKind.LASAN_HEAD:
        return LasanHeadModel(encoder, spec, seed)
    return HybridModel(encoder, spec, seed)


# ---------------------------------------------------------------- strategies


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.FINE_TUNE
    probe_epochs: int = 50
    probe_lr: float = 1e-2
    ft_epochs: int = 100
    ft_lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 32
    warmup_epochs: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(StrategyKind, self.kind))
        if min(self.probe_epochs, self.ft_epochs) < 1 or min(self.probe_lr, self.ft_lr, self.clip_norm) <= 0:
            raise ConfigurationError("strategy epochs and rates must be positive", module="foundation")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("weight_decay and warmup_epochs must be >= 0", module="foundation")


@dataclass
class StrategyResult:
    model: Module
    stages: list
    steps: int


def _stage_config(cfg, epochs, lr, seed):
    return TrainConfig(
        batch_size=cfg.batch_size,
        base_lr=lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=min(cfg.warmup_epochs, epochs - 1),
        max_epochs=epochs,
        patience=None,
        clip_norm=cfg.clip_norm,
        seed=seed,
    )


def apply_strategy(handle, model, strategy, train_set, val_set, seed=0):
    """Train ``model`` (which wraps ``handle``) under a transfer strategy.

    LINEAR_PROBE freezes the encoder and trains everything else;
    FINE_TUNE trains everything; PROBE_THEN_FINE_TUNE runs the probe stage
    and then the fine-tune stage. Stages run for their fixed epoch counts
    and keep the best-validation checkpoint of each stage.
    """
    stages = []
    kinds = {
        StrategyKind.LINEAR_PROBE: ["probe"],
        StrategyKind.FINE_TUNE: ["ft"],
        StrategyKind.PROBE_THEN_FINE_TUNE: ["probe", "ft"],
    }[strategy.kind]
    for i, stage_name in enumerate(kinds):
        if stage_name == "probe":
            model.set_trainable(True)
            handle.trainable = False
            tc = _stage_config(strategy, strategy.probe_epochs, strategy.probe_lr, seed + i)
        else:
            model.set_trainable(True)
            handle.trainable = True
            tc = _stage_config(strategy, strategy.ft_epochs, strategy.ft_lr, seed + i)
        stages.append(train(model, train_set, val_set, tc))
    handle.trainable = False
    return StrategyResult(model, stages, sum(s.steps for s in stages))


# ---------------------------------------------------------------- checkpoints

_LINEAR_HEAD = "linear_head"


def model_checkpoint(model):
    """``(meta, state)`` for a LASW file; parameter names get a component prefix."""
    meta = {}
    if isinstance(model, LASAN):
        meta["integration"] = IntegrationKind.STANDALONE.value
        state = {f"lasan.{k}": v for k, v in model.state_dict().items()}
    else:
        kind = {LasanHeadModel: IntegrationKind.LASAN_HEAD.value, HybridModel: IntegrationKind.HYBRID.value}
        meta["integration"] = kind.get(type(model), _LINEAR_HEAD)
        meta["encoder"] = model.handle.name
        meta["encoder.dim"] = model.handle.dim
        meta["encoder.seed"] = model.handle.seed
        state = model.state_dict()
    if hasattr(model, "spec"):
        meta.update({f"spec.{k}": v for k, v in model.spec.to_dict().items()})
    else:
        meta["n_classes"] = model.n_classes
    return {k: str(v) for k, v in meta.items()}, state


def model_from_checkpoint(meta, state):
    """Rebuild the model described by a LASW header and load its weights."""
    spec_keys = {k[5:]: v for k, v in meta.items() if k.startswith("spec.")}
    spec = LasanSpec.from_dict(spec_keys) if spec_keys else None
    kind = meta.get("integration")
    if kind == IntegrationKind.STANDALONE.value:
        model = LASAN(spec)
        state = {k.removeprefix("lasan."): v for k, v in state.items()}
    else:
        enc_kind = _enum(EncoderKind, meta["encoder"])
        dim = int(meta["encoder.dim"])
        seed = int(meta["encoder.seed"])
        # weights come from the checkpoint, so skip the pretext pretraining
        handle = EncoderHandle(enc_kind.value, StubEncoder(dim, np.random.default_rng([seed, dim])), enc_kind, seed)
        if kind == _LINEAR_HEAD:
            model = LinearProbeModel(handle, int(meta["n_classes"]))
        elif kind in (IntegrationKind.LASAN_HEAD.value, IntegrationKind.HYBRID.value):
            model = build_integration(kind, handle, spec)
        else:
            raise ConfigurationError(f"checkpoint has unknown integration {kind!r}", module="foundation")
    model.load_state_dict(state)
    model.eval()
    return model
