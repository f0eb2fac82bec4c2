"""Model assembly: the encoder/dual-decoder network, its three task heads,
supervised and masked-recovery losses, the SGD trainer, and checkpoint I/O.

The network maps a FeatureBundle (four fused branches, one set of values per
3-second tagging step) to per-step tag emissions, record-level variability
logits, and, in pretrain mode, per-sample recovery logits. Gradients are
hand-derived in the layer modules; this file only orchestrates them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .crf import CrfParams, crf_nll_and_grad, crf_viterbi
from .kan import KanLayer
from .preprocess import FeatureBundle, MaskSpec, build_features, make_pretrain_sample
from .scconv import ScConv
from .types import (
    BPM_MAX,
    EngineConfig,
    FhrRecord,
    SAMPLES_PER_STEP,
    spans_from_tags,
    tags_from_annotations,
)

VOCAB = BPM_MAX + 1
CHANNEL_ORDER = "raw*4,z*4,mean,var"

MODE_SUPERVISED = "supervised"
MODE_PRETRAIN = "pretrain"


class TrainingError(RuntimeError):
    """Raised when a loss term stops being finite."""


class CheckpointError(Exception):
    pass


class CheckpointHeaderError(CheckpointError):
    """Unknown magic, version, or incompatible channel layout."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared payload does."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not fit the target model."""


@dataclass
class ModelOutput:
    tag_emissions: np.ndarray            # (steps, 3)
    cpm_logits: np.ndarray               # (cpm_classes,)
    bpm_logits: np.ndarray               # (bpm_classes,)
    pretrain_logits: np.ndarray | None   # (steps, 12, 256) in pretrain mode


@dataclass
class SupervisedSample:
    bundle: FeatureBundle
    tags: np.ndarray
    cpm_label: int | None = None
    bpm_label: int | None = None


@dataclass
class PretrainSample:
    bundle: FeatureBundle
    mask: MaskSpec
    targets: np.ndarray


@dataclass
class Prediction:
    """Model output for one record, in the shape the evaluator consumes."""

    record: FhrRecord  # input id/samples with model-produced annotation spans
    tags: np.ndarray
    cpm_pred: int
    bpm_pred: int
    cpm_probs: np.ndarray
    bpm_probs: np.ndarray


class StepFuser(nn.Module):
    """Fuses the four branches into one vector per tagging step: the four
    discrete raw values embed through a shared table and average, the six
    real channels (four z-scores, scaled mean, scaled std) project linearly."""

    def __init__(self, d, rng):
        super().__init__()
        self.embed = nn.Embedding(VOCAB, d, rng)
        self.real = nn.Linear(6, d, rng)

    def forward(self, raw_steps, real_steps):
        if raw_steps.min() < 0 or raw_steps.max() >= VOCAB:
            raise ValueError("embedding: raw samples outside the [0, 255] vocabulary")
        self._fold = raw_steps.shape[1]
        emb = self.embed(raw_steps)  # (T, fold, d)
        return emb.mean(axis=1) + self.real(real_steps)

    def backward(self, dout):
        self.real.backward(dout)
        self.embed.backward(
            np.repeat(dout[:, None, :], self._fold, axis=1) / self._fold
        )
        return None


class PositionalAffine(nn.Module):
    """Learned affine on the position-augmented features: (x + pos_t) W + b."""

    def __init__(self, d, rng, base):
        super().__init__()
        self.base = base
        self.w = self.add_param("w", nn.uniform_init(rng, (d, d), d))
        self.b = self.add_param("b", np.zeros(d))

    def forward(self, x):
        pos = nn.sinusoidal_pe_table(np.arange(x.shape[0]), x.shape[1], self.base)
        self._xp = x + pos
        return self._xp @ self.w + self.b

    def backward(self, dout):
        self._grads["w"] += self._xp.T @ dout
        self._grads["b"] += dout.sum(axis=0)
        return dout @ self.w.T


class PostDecoderRound(nn.Module):
    """One interleaving of a 1-D convolution and an affine map, each wrapped
    in silu and a residual."""

    def __init__(self, d, rng):
        super().__init__()
        self.conv = nn.ResidualSilu(nn.Conv1d(d, d, 3, rng, pad=1))
        self.lin = nn.ResidualSilu(nn.Linear(d, d, rng))

    def forward(self, x):
        return self.lin(self.conv(x))

    def backward(self, dout):
        return self.conv.backward(self.lin.backward(dout))


class ClassifierHead(nn.Module):
    """Mean-pooled record vector -> re-parameterizable blocks -> spline map."""

    def __init__(self, d, classes, rng):
        super().__init__()
        self.rep0 = nn.RepConvVec(d, rng)
        self.rep1 = nn.RepConvVec(d, rng)
        self.kan = KanLayer(d, classes, rng)

    def forward(self, x):
        self._h0 = self.rep0(x)
        a0 = nn.silu(self._h0)
        self._h1 = self.rep1(a0)
        return self.kan(nn.silu(self._h1))

    def backward(self, dout):
        da1 = self.kan.backward(dout) * nn.silu_grad(self._h1)
        da0 = self.rep1.backward(da1) * nn.silu_grad(self._h0)
        return self.rep0.backward(da0)


class CrfLayer(nn.Module):
    def __init__(self, k):
        super().__init__()
        self.transitions = self.add_param("transitions", np.zeros((k, k)))
        self.start = self.add_param("start", np.zeros(k))
        self.stop = self.add_param("stop", np.zeros(k))

    def as_params(self) -> CrfParams:
        return CrfParams(self.transitions, self.start, self.stop)

    def accumulate(self, grads: CrfParams):
        self._grads["transitions"] += grads.transitions
        self._grads["start"] += grads.start
        self._grads["stop"] += grads.stop


class FhrctgModel(nn.Module):
    """Encoder / dual-decoder network with tag, variability, and recovery heads."""

    def __init__(self, cfg: EngineConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        rng = np.random.default_rng(cfg.seed)

        self.fuser = StepFuser(d, rng)
        self.pe = PositionalAffine(d, rng, cfg.pe_base)
        self.enc1 = nn.ResidualSilu(nn.Conv1d(d, d, 5, rng, pad=2))
        self.scconv = ScConv(d, rng)
        self.enc2 = nn.ResidualSilu(nn.Conv1d(d, d, 3, rng, pad=1))
        self.deca = [
            nn.DecoderLayer(d, cfg.heads, rng, cfg.pe_base)
            for _ in range(cfg.decoder_layers)
        ]
        self.decb = [PostDecoderRound(d, rng) for _ in range(cfg.decoder_layers)]
        self.final_norm = nn.RmsNorm(d)
        self.tag_kan = KanLayer(d, 3, rng)
        self.crf = CrfLayer(3)
        self.cpm_head = ClassifierHead(d, cfg.cpm_classes, rng)
        self.bpm_head = ClassifierHead(d, cfg.bpm_classes, rng)
        self.pretrain_head = nn.Linear(d, SAMPLES_PER_STEP * VOCAB, rng)

    # -- forward ------------------------------------------------------------

    def _fuse_inputs(self, bundle: FeatureBundle):
        t_len = bundle.fused_len
        fold = self.cfg.fold
        raw_steps = bundle.sampled_raw.reshape(t_len, fold)
        real_steps = np.concatenate(
            [
                bundle.sampled_z.reshape(t_len, fold),
                (bundle.means / BPM_MAX)[:, None],
                (np.sqrt(bundle.variances) / BPM_MAX)[:, None],
            ],
            axis=1,
        )
        return raw_steps, real_steps

    def forward(self, bundle: FeatureBundle, mode: str = MODE_SUPERVISED) -> ModelOutput:
        if mode not in (MODE_SUPERVISED, MODE_PRETRAIN):
            raise ValueError(f"unknown mode {mode!r}")
        raw_steps, real_steps = self._fuse_inputs(bundle)
        h = self.fuser(raw_steps, real_steps)
        h = self.pe(h)
        h = self.enc2(self.scconv(self.enc1(h)))
        enc = h

        a = enc
        for layer in self.deca:
            a = layer(a)
        b = enc
        for layer in self.decb:
            b = layer(b)
        fused = self.final_norm(enc + a + b)
        self._t_len = fused.shape[0]

        emissions = self.tag_kan(fused)
        pooled = fused.mean(axis=0, keepdims=True)
        self._pooled = pooled
        cpm_logits = self.cpm_head(pooled)[0]
        bpm_logits = self.bpm_head(pooled)[0]
        pretrain_logits = None
        if mode == MODE_PRETRAIN:
            flat = self.pretrain_head(fused)
            pretrain_logits = flat.reshape(self._t_len, SAMPLES_PER_STEP, VOCAB)
        return ModelOutput(emissions, cpm_logits, bpm_logits, pretrain_logits)

    # -- backward -----------------------------------------------------------

    def backward_from_heads(self, d_emissions=None, d_cpm=None, d_bpm=None, d_pretrain=None):
        t_len = self._t_len
        d = self.cfg.embed_dim
        dfused = np.zeros((t_len, d))
        if d_emissions is not None:
            dfused += self.tag_kan.backward(d_emissions)
        dpooled = np.zeros((1, d))
        if d_cpm is not None:
            dpooled += self.cpm_head.backward(d_cpm[None, :])
        if d_bpm is not None:
            dpooled += self.bpm_head.backward(d_bpm[None, :])
        dfused += dpooled / t_len
        if d_pretrain is not None:
            dfused += self.pretrain_head.backward(
                d_pretrain.reshape(t_len, SAMPLES_PER_STEP * VOCAB)
            )

        dsum = self.final_norm.backward(dfused)
        da = dsum
        for layer in reversed(self.deca):
            da = layer.backward(da)
        db = dsum
        for layer in reversed(self.decb):
            db = layer.backward(db)
        denc = dsum + da + db

        dh = self.enc1.backward(self.scconv.backward(self.enc2.backward(denc)))
        self.fuser.backward(self.pe.backward(dh))


def build_model(cfg: EngineConfig) -> FhrctgModel:
    return FhrctgModel(cfg)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _cross_entropy_and_grad(logits: np.ndarray, label: int):
    lsm = nn.log_softmax(logits)
    if not 0 <= label < len(logits):
        raise ValueError(f"label {label} out of range for {len(logits)} classes")
    loss = -float(lsm[label])
    grad = np.exp(lsm)
    grad[label] -= 1.0
    return loss, grad


def supervised_loss_and_grad(model: FhrctgModel, sample: SupervisedSample) -> float:
    """CRF NLL over the tag sequence plus cross-entropy for each present
    variability label; accumulates gradients into the model."""
    out = model.forward(sample.bundle, MODE_SUPERVISED)
    if out.tag_emissions.shape[0] != len(sample.tags):
        raise ValueError(
            f"tags of length {len(sample.tags)} do not match "
            f"{out.tag_emissions.shape[0]} steps"
        )
    loss_tag, d_em, d_crf = crf_nll_and_grad(
        out.tag_emissions, sample.tags, model.crf.as_params()
    )
    model.crf.accumulate(d_crf)

    d_cpm = d_bpm = None
    loss_cpm = loss_bpm = 0.0
    if sample.cpm_label is not None:
        loss_cpm, d_cpm = _cross_entropy_and_grad(out.cpm_logits, sample.cpm_label)
    if sample.bpm_label is not None:
        loss_bpm, d_bpm = _cross_entropy_and_grad(out.bpm_logits, sample.bpm_label)

    for name, value in (("tag", loss_tag), ("cpm", loss_cpm), ("bpm", loss_bpm)):
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {name} loss term: {value}")
    model.backward_from_heads(d_emissions=d_em, d_cpm=d_cpm, d_bpm=d_bpm)
    return float(loss_tag + loss_cpm + loss_bpm)


def pretrain_loss_and_grad(model: FhrctgModel, sample: PretrainSample) -> float:
    """Mean cross-entropy over masked raw positions only, each predicted from
    its step's 12 x 256 logit block at its within-window offset."""
    positions = sample.mask.positions()
    if len(positions) == 0:
        raise ValueError("mask is empty; nothing to recover")
    out = model.forward(sample.bundle, MODE_PRETRAIN)
    steps = positions // SAMPLES_PER_STEP
    offsets = positions % SAMPLES_PER_STEP
    logits = out.pretrain_logits[steps, offsets]  # (M, 256)
    lsm = nn.log_softmax(logits, axis=-1)
    m = len(positions)
    loss = -float(lsm[np.arange(m), sample.targets].mean())
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite pretrain loss: {loss}")

    dsel = np.exp(lsm)
    dsel[np.arange(m), sample.targets] -= 1.0
    dsel /= m
    d_pre = np.zeros_like(out.pretrain_logits)
    d_pre[steps, offsets] = dsel
    model.backward_from_heads(d_pretrain=d_pre)
    return loss


def sample_loss_and_grad(model: FhrctgModel, sample) -> float:
    if isinstance(sample, SupervisedSample):
        return supervised_loss_and_grad(model, sample)
    if isinstance(sample, PretrainSample):
        return pretrain_loss_and_grad(model, sample)
    raise TypeError(f"unknown sample type {type(sample).__name__}")


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

CLIP_NORM = 1.0


def train_step(model: FhrctgModel, batch, lr: float) -> float:
    """One SGD step on the mean batch loss with global-norm gradient clipping.

    Deterministic given the batch order; lr=0 leaves parameters bit-identical.
    """
    if not batch:
        raise ValueError("empty batch")
    model.zero_grad()
    total = 0.0
    for sample in batch:
        total += sample_loss_and_grad(model, sample)

    pairs = model.param_grad_pairs()
    inv_b = 1.0 / len(batch)
    sq = 0.0
    for _, _, g in pairs:
        g *= inv_b
        sq += float(np.sum(g * g))
    norm = np.sqrt(sq)
    if norm > CLIP_NORM:
        scale = CLIP_NORM / norm
        for _, _, g in pairs:
            g *= scale
    for _, p, g in pairs:
        p -= lr * g
    return total * inv_b


def _derive_seed(rng) -> int:
    return int(rng.integers(0, 2**63 - 1))


def run_pretraining(model, records, steps, lr, seed, target_len=None):
    """Masked-span recovery: each step slices a random record, hides a few
    spans, and trains the model to recover them. Returns per-step losses."""
    cfg = model.cfg
    usable = [r.samples[: len(r.samples) - len(r.samples) % SAMPLES_PER_STEP] for r in records]
    if target_len is None:
        target_len = min(len(x) for x in usable)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        x = usable[int(rng.integers(0, len(usable)))]
        sliced, mask, targets = make_pretrain_sample(x, target_len, _derive_seed(rng))
        bundle = build_features_from_samples(sliced, cfg, _derive_seed(rng))
        losses.append(train_step(model, [PretrainSample(bundle, mask, targets)], lr))
    return losses


def run_supervised_training(model, records, epochs, lr, seed, batch_size=1, lr_decay=0.9):
    """Epoch loop over annotated records; features are resampled each epoch so
    the random 1-of-3 downsampling acts as augmentation. The learning rate
    decays geometrically per epoch, which settles the endpoint of the
    batch-of-one SGD walk. Returns epoch mean losses."""
    cfg = model.cfg
    tags = [tags_from_annotations(r) for r in records]
    rng = np.random.default_rng(seed)
    epoch_losses = []
    for epoch in range(epochs):
        epoch_lr = lr * lr_decay**epoch
        order = rng.permutation(len(records))
        batch, losses = [], []
        for idx in order:
            rec = records[idx]
            bundle = build_features(rec, cfg, _derive_seed(rng))
            batch.append(
                SupervisedSample(bundle, tags[idx], rec.cpm_label, rec.amp_label)
            )
            if len(batch) == batch_size:
                losses.append(train_step(model, batch, epoch_lr))
                batch = []
        if batch:
            losses.append(train_step(model, batch, epoch_lr))
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def predict_record(model: FhrctgModel, record: FhrRecord, seed) -> Prediction:
    """Viterbi-decode the tag sequence and argmax the variability heads."""
    bundle = build_features(record, model.cfg, seed)
    out = model.forward(bundle, MODE_SUPERVISED)
    tags, _ = crf_viterbi(out.tag_emissions, model.crf.as_params())
    spans = spans_from_tags(tags)
    cpm_probs = nn.softmax(out.cpm_logits)
    bpm_probs = nn.softmax(out.bpm_logits)
    pred_record = FhrRecord(
        id=record.id,
        samples=record.samples[: bundle.fused_len * SAMPLES_PER_STEP],
        annotations=spans,
    )
    return Prediction(
        record=pred_record,
        tags=tags,
        cpm_pred=int(np.argmax(cpm_probs)),
        bpm_pred=int(np.argmax(bpm_probs)),
        cpm_probs=cpm_probs,
        bpm_probs=bpm_probs,
    )


def build_features_from_samples(samples, cfg, seed) -> FeatureBundle:
    rec = FhrRecord(id="_", samples=samples)
    return build_features(rec, cfg, seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"FHRC"
VERSION = 1


class _Cursor:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(model: FhrctgModel, path) -> None:
    """Little-endian binary dump: header with the config block, then every
    tensor in lexicographic name order as float32 row-major values."""
    cfg = model.cfg
    tensors = sorted(model.named_params(), key=lambda kv: kv[0])
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack(
        "<IIIIII",
        VERSION,
        cfg.embed_dim,
        cfg.heads,
        cfg.decoder_layers,
        cfg.cpm_classes,
        cfg.bpm_classes,
    )
    order = CHANNEL_ORDER.encode()
    buf += struct.pack("<H", len(order)) + order
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        encoded = name.encode()
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path, cfg: EngineConfig | None = None):
    """Read a checkpoint; returns (model, config).

    When `cfg` is given the stored tensors must fit a model built from it;
    otherwise the embedded config block is used. Bad magic/version raise
    CheckpointHeaderError, short files CheckpointTruncatedError, and tensor
    mismatches CheckpointShapeError naming the tensor.
    """
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.take(4) != MAGIC:
        raise CheckpointHeaderError("bad magic; not a model checkpoint")
    version = cur.u32()
    if version != VERSION:
        raise CheckpointHeaderError(f"unsupported checkpoint version {version}")
    d, heads, layers, cpm_classes, bpm_classes = (cur.u32() for _ in range(5))
    order = cur.take(cur.u16()).decode()
    if order != CHANNEL_ORDER:
        raise CheckpointHeaderError(
            f"incompatible channel order {order!r}; expected {CHANNEL_ORDER!r}"
        )
    if cfg is None:
        cfg = EngineConfig(
            embed_dim=d,
            heads=heads,
            decoder_layers=layers,
            cpm_classes=cpm_classes,
            bpm_classes=bpm_classes,
        )
    model = build_model(cfg)
    params = dict(model.named_params())

    n_tensors = cur.u32()
    seen = set()
    for _ in range(n_tensors):
        name = cur.take(cur.u16()).decode()
        rank = cur.u8()
        shape = tuple(cur.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = cur.take(4 * count)
        if name not in params:
            raise CheckpointShapeError(f"tensor {name!r} does not exist in this model")
        if params[name].shape != shape:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {shape}, model expects {params[name].shape}"
            )
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        params[name][:] = values
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise CheckpointShapeError(f"checkpoint is missing tensors: {missing[:3]}")
    return model, cfg
