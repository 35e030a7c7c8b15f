"""Weighted-loss training: class weights, warmup-cosine schedule, Adam, fit loop and checkpoints."""
import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from titanet_lid.audio import FeatureConfig, FeatureMatrix, log_mel, segment_fixed, spec_augment, speed_perturb
from titanet_lid.errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    LabelError,
    TrainingDivergenceError,
)
from titanet_lid.evaluation import build_report, evaluate_features
from titanet_lid.model import Model, ModelConfig, batch_features, freeze_encoder, param_shapes, with_dropout
from titanet_lid.nn import functional as F
from titanet_lid.nn.tensor import Tensor

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- class weights

@dataclass
class ClassWeights:
    weights: np.ndarray
    class_order: list

    def __len__(self):
        return len(self.class_order)

    def as_dict(self):
        return dict(zip(self.class_order, self.weights.tolist()))


def class_weights(counts, class_order=None):
    """Inverse-frequency weights ``w_i = sum(c) / c_i``, normalized to sum to one.

    ``counts`` is a sequence or a ``label -> count`` mapping.
    """
    if isinstance(counts, dict):
        class_order = list(counts) if class_order is None else list(class_order)
        counts = [counts.get(label, 0) for label in class_order]
    counts = [int(c) for c in counts]
    if class_order is None:
        class_order = [str(i) for i in range(len(counts))]
    if not counts:
        raise DegenerateInputError("no classes to weight")
    zero = [label for label, c in zip(class_order, counts) if c < 1]
    if zero:
        raise DegenerateInputError(f"classes without samples cannot be weighted: {zero}")
    total = sum(counts)
    raw = np.array([total / c for c in counts])
    return ClassWeights(raw / raw.sum(), list(class_order))


def class_weights_exact(counts):
    """Same weights as exact fractions (reference arithmetic)."""
    total = sum(counts)
    raw = [Fraction(total, c) for c in counts]
    s = sum(raw)
    return [r / s for r in raw]


# --------------------------------------------------------------------------- config & schedule

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    warmup_ratio: float = 0.10
    fine_tune_lr_peak: float = 5e-5
    fine_tune_dropout: float = 0.1
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    speed_perturb: bool = True
    speed_factors: tuple = (0.95, 1.0, 1.05)
    spec_augment: bool = True
    segment_seconds: float = 3.0
    min_tail_seconds: float = 1.0
    workers: int = 1
    eval_batch_size: int = 16
    extra_perturbations: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must be in (0, 1)")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @classmethod
    def finetune_defaults(cls, **overrides):
        base = dict(epochs=10, speed_perturb=True, spec_augment=False)
        base.update(overrides)
        return cls(**base)

    def for_finetune(self):
        """Schedule for fine-tuning: peak ``fine_tune_lr_peak`` with the pre-training max/min ratio kept."""
        ratio = self.lr_min / self.lr_max
        return replace(self, lr_max=self.fine_tune_lr_peak, lr_min=self.fine_tune_lr_peak * ratio)

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "extra_perturbations"}
        d["adam_betas"] = list(self.adam_betas)
        d["speed_factors"] = list(self.speed_factors)
        return d


def lr_at(step, total_steps, cfg):
    """Linear warmup from 0 to ``lr_max`` over ``warmup_ratio * total_steps``, then cosine to ``lr_min``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_ratio * total_steps
    if step < warmup:
        return cfg.lr_max * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, cfg, frozen=()):
    """One bias-corrected Adam update, in place on the ``params`` arrays.

    ``params`` and ``grads`` map names to arrays; names in ``frozen`` or with a
    ``None`` gradient are skipped.
    """
    b1, b2 = cfg.adam_betas
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}", name)
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            continue
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"TLID"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    label_set: list
    params: dict
    buffers: dict
    metrics: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_model(self, config=None):
        cfg = config or self.model_config
        _check_shapes(self.params, param_shapes(cfg))
        params = {n: Tensor(self.params[n].astype(np.float64)) for n in param_shapes(cfg)}
        buffers = {n: b.astype(np.float64) for n, b in self.buffers.items()}
        return Model(cfg, params, buffers)


def _check_shapes(tensors, expected):
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(
                f"shape mismatch for tensor {name!r}: checkpoint has {tuple(tensors[name].shape)}, "
                f"config expects {tuple(shape)}"
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"unexpected tensor(s) in checkpoint: {extra}")


def checkpoint_from_model(model, labels, metrics=None):
    if len(labels) != model.config.num_classes:
        raise ConfigError(f"{len(labels)} labels for a {model.config.num_classes}-class model")
    return Checkpoint(
        model.config, list(labels),
        {n: t.data.astype(np.float32) for n, t in model.params.items()},
        {n: b.astype(np.float32) for n, b in model.buffers.items()},
        dict(metrics or {}),
    )


def save_checkpoint(ckpt, path):
    doc = json.dumps({
        "model_config": ckpt.model_config.to_dict(),
        "label_set": list(ckpt.label_set),
        "metrics": ckpt.metrics,
    }).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(doc)), doc]
    tensors = list(ckpt.params.items()) + list(ckpt.buffers.items())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, config=None):
    """Read and verify a checkpoint; with ``config`` the tensors must also fit that config."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4, "magic")
    version, doc_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    try:
        doc = json.loads(r.take(doc_len, "document").decode("utf-8"))
        model_config = ModelConfig.from_dict(doc["model_config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint document: {exc}") from None
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after tensor records")
    buffers = {n: a for n, a in tensors.items() if n.endswith((".running_mean", ".running_var"))}
    params = {n: a for n, a in tensors.items() if n not in buffers}
    _check_shapes(params, param_shapes(model_config))
    if config is not None:
        _check_shapes(params, param_shapes(config))
    labels = list(doc.get("label_set", []))
    if len(labels) != model_config.num_classes:
        raise CheckpointError(f"{len(labels)} labels stored for {model_config.num_classes} classes")
    return Checkpoint(model_config, labels, params, buffers, doc.get("metrics", {}), version)


def write_history(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------- fit

@dataclass
class FitResult:
    best: Checkpoint
    history: list
    model: Model
    weights: ClassWeights


class _TrainFeatures:
    """3 s training segments with features cached per (segment, speed factor)."""

    def __init__(self, dataset, labels, cfg, feature_cfg):
        self.cfg = cfg
        self.feature_cfg = feature_cfg
        index = {label: i for i, label in enumerate(labels)}
        self.segments, self.targets = [], []
        for e in dataset:
            for seg in segment_fixed(e.load(), cfg.segment_seconds, cfg.min_tail_seconds):
                if seg.num_samples >= feature_cfg.win_samples:
                    self.segments.append(seg)
                    self.targets.append(index[e.label])
        if not self.segments:
            raise DegenerateInputError("training set yields no segments")
        self.targets = np.asarray(self.targets)
        self._cache = {}

    def __len__(self):
        return len(self.segments)

    def features(self, i, factor):
        key = (i, factor)
        if key not in self._cache:
            self._cache[key] = self._compute(key)
        return self._cache[key]

    def warm(self, keys):
        missing = [k for k in dict.fromkeys(keys) if k not in self._cache]
        if self.cfg.workers > 1 and len(missing) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                for k, mels in zip(missing, pool.map(self._compute, missing)):
                    self._cache[k] = mels
        else:
            for k in missing:
                self._cache[k] = self._compute(k)

    def _compute(self, key):
        i, factor = key
        seg = self.segments[i] if factor == 1.0 else speed_perturb(self.segments[i], factor)
        for fn in self.cfg.extra_perturbations:
            seg = fn(seg, np.random.default_rng([self.cfg.seed, i]))
        return log_mel(seg, self.feature_cfg).mels

    def frames(self, i, factor):
        n = self.segments[i].num_samples
        if factor != 1.0:
            n = int(round(n / factor))
        return 1 + (n - self.feature_cfg.win_samples) // self.feature_cfg.hop_samples


def _epoch_plan(data, cfg, epoch):
    """Seeded shuffle, per-segment speed factor, then equal-length batches (no padding)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(data))
    if cfg.speed_perturb:
        factors = rng.choice(np.asarray(cfg.speed_factors, dtype=float), size=len(data))
    else:
        factors = np.ones(len(data))
    buckets = {}
    for i in order:
        f = float(factors[i])
        buckets.setdefault(data.frames(i, f), []).append((int(i), f))
    batches = []
    for _, items in sorted(buckets.items()):
        batches += [items[s:s + cfg.batch_size] for s in range(0, len(items), cfg.batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


def _embed_all(model, feats, batch_size):
    """Pooled encoder output for each feature matrix, batched by equal length."""
    out = np.empty((len(feats), 2 * model.config.epilogue_channels))
    order = sorted(range(len(feats)), key=lambda i: feats[i].num_frames)
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        x, mask = batch_features([feats[i] for i in idx])
        out[idx] = model.embed(x, mask)
    return out


def fit(model, train_set, val_set, cfg, mode="pretrain", labels=None,
        feature_cfg=FeatureConfig(), on_epoch=None):
    """Train ``model`` and keep the checkpoint with the best validation macro accuracy.

    ``mode="finetune"`` freezes the encoder, sets decoder dropout to
    ``cfg.fine_tune_dropout`` and peaks the schedule at ``cfg.fine_tune_lr_peak``.
    Loss weights always come from the class counts of ``train_set``.
    """
    if mode not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown fit mode {mode!r}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    labels = list(labels) if labels is not None else train_set.label_set
    if len(labels) != model.config.num_classes:
        raise ConfigError(f"model has {model.config.num_classes} outputs but {len(labels)} labels were given")
    for name, ds in (("train", train_set), ("validation", val_set)):
        unknown = sorted(set(ds.label_set) - set(labels))
        if unknown:
            raise LabelError(f"{name} set has labels outside the model label set: {unknown}")

    weights = class_weights(train_set.count_vector(labels), labels)
    if mode == "finetune":
        if not model.encoder_frozen:
            model = freeze_encoder(model)
        model = with_dropout(model, decoder_dropout_p=cfg.fine_tune_dropout)
        sched = cfg.for_finetune()
    else:
        sched = cfg

    data = _TrainFeatures(train_set, labels, cfg, feature_cfg)
    val_feats, val_truth, val_durs = [], [], []
    for e in val_set:
        audio = e.load()
        val_feats.append(log_mel(audio, feature_cfg))
        val_truth.append(e.label)
        val_durs.append(audio.duration)

    plans = [_epoch_plan(data, cfg, epoch) for epoch in range(cfg.epochs)]
    total_steps = sum(len(p) for p in plans)
    trainable = model.trainable()
    state = AdamState()
    step = 0
    history = []
    best, best_acc = None, -1.0
    aug_rng = np.random.default_rng([cfg.seed, 7919])
    drop_rng = np.random.default_rng([cfg.seed, 104729])

    # A frozen encoder is a fixed function of its input, so without SpecAugment
    # (the only per-step randomness ahead of it) its pooled output is cached.
    reuse = model.encoder_frozen and not cfg.spec_augment
    pooled_cache = {}
    val_pooled = _embed_all(model, val_feats, cfg.eval_batch_size) if model.encoder_frozen else None

    for epoch, plan in enumerate(plans):
        data.warm([k for batch in plan for k in batch])
        losses = []
        for batch in plan:
            targets = data.targets[[i for i, _ in batch]]
            model.zero_grad()
            if reuse:
                todo = [k for k in batch if k not in pooled_cache]
                if todo:
                    pooled_cache.update(zip(todo, model.embed(np.stack([data.features(*k) for k in todo]))))
                logits = model.classify(np.stack([pooled_cache[k] for k in batch]), mode="train", rng=drop_rng)
            else:
                mats = [data.features(i, f) for i, f in batch]
                if cfg.spec_augment:
                    x = np.stack([spec_augment(FeatureMatrix(m, m.shape[1], ""), seed=aug_rng).mels for m in mats])
                else:
                    x = np.stack(mats)
                logits = model.forward(x, mode="train", rng=drop_rng)
            loss = F.weighted_cross_entropy(logits, targets, weights)
            loss.backward()
            lr = lr_at(step + 1, total_steps, sched)
            adam_step({n: t.data for n, t in trainable.items()},
                      {n: t.grad for n, t in trainable.items()}, state, lr, cfg, model.frozen_names)
            step += 1
            losses.append(loss.item())
        if val_pooled is not None:
            preds = np.argmax(model.classify(val_pooled).data, axis=1)
            report = build_report(val_truth, [labels[i] for i in preds], val_durs)
        else:
            report = evaluate_features(model, val_feats, val_truth, val_durs, labels, cfg.eval_batch_size)
        rec = {"epoch": epoch + 1, "step": step, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_macro_acc": report.macro_accuracy}
        history.append(rec)
        log.info("epoch %d step %d lr %.3g loss %.4f val macro acc %.4f", *rec.values())
        if on_epoch is not None:
            on_epoch(rec)
        if report.macro_accuracy > best_acc:
            best_acc = report.macro_accuracy
            best = checkpoint_from_model(model, labels, {"epoch": epoch + 1, "val_macro_acc": best_acc})
    return FitResult(best, history, model, weights)

