"""TitaNet-LID-BxRxC network: separable-conv encoder with SE mega-blocks and a stats-pooling decoder."""
from dataclasses import asdict, dataclass, replace

import numpy as np

from titanet_lid.errors import ConfigError, DimensionError
from titanet_lid.nn import functional as F
from titanet_lid.nn.tensor import SequenceMask, Tensor, no_grad

DECODER_PREFIX = "decoder."


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 3
    repeats: int = 5
    channels: int = 1024
    mega_kernel_sizes: tuple = (7, 11, 15)
    prologue_kernel: int = 3
    prologue_channels: int | None = None  # None -> channels
    epilogue_kernel: int = 1
    epilogue_channels: int = 3072
    se_reduction: int = 8
    dropout_p: float = 0.0
    decoder_dropout_p: float = 0.0
    hidden_dim: int = 512
    num_classes: int = 107
    n_mels: int = 80

    def __post_init__(self):
        object.__setattr__(self, "mega_kernel_sizes", tuple(int(k) for k in self.mega_kernel_sizes))
        self.validate()

    @property
    def prologue_out(self):
        return self.channels if self.prologue_channels is None else self.prologue_channels

    @property
    def se_bottleneck(self):
        return max(1, self.channels // self.se_reduction)

    @property
    def name(self):
        return f"TitaNet-LID-{self.num_blocks}x{self.repeats}x{self.channels}"

    def validate(self):
        positive = ("num_blocks", "repeats", "channels", "epilogue_channels", "se_reduction",
                    "hidden_dim", "n_mels", "prologue_kernel", "epilogue_kernel")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.prologue_out < 1:
            raise ConfigError("prologue_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.mega_kernel_sizes) != self.num_blocks:
            raise ConfigError(
                f"{self.num_blocks} mega-blocks need {self.num_blocks} kernel sizes, "
                f"got {list(self.mega_kernel_sizes)}"
            )
        for k in (*self.mega_kernel_sizes, self.prologue_kernel, self.epilogue_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        for name in ("dropout_p", "decoder_dropout_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["mega_kernel_sizes"] = list(self.mega_kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg):
    """Ordered ``name -> shape`` table of trainable parameters for ``cfg``."""
    C, E, H = cfg.channels, cfg.epilogue_channels, cfg.hidden_dim
    P, cb = cfg.prologue_out, cfg.se_bottleneck
    shapes = {
        "prologue.dw.weight": (cfg.n_mels, cfg.prologue_kernel),
        "prologue.pw.weight": (P, cfg.n_mels),
        "prologue.bn.gamma": (P,),
        "prologue.bn.beta": (P,),
    }
    for b, k in enumerate(cfg.mega_kernel_sizes):
        for r in range(cfg.repeats):
            cin = P if (b == 0 and r == 0) else C
            pre = f"blocks.{b}.sub.{r}"
            shapes[f"{pre}.dw.weight"] = (cin, k)
            shapes[f"{pre}.pw.weight"] = (C, cin)
            shapes[f"{pre}.bn.gamma"] = (C,)
            shapes[f"{pre}.bn.beta"] = (C,)
        pre = f"blocks.{b}"
        shapes[f"{pre}.se.fc1.weight"] = (cb, C)
        shapes[f"{pre}.se.fc1.bias"] = (cb,)
        shapes[f"{pre}.se.fc2.weight"] = (C, cb)
        shapes[f"{pre}.se.fc2.bias"] = (C,)
        shapes[f"{pre}.res.pw.weight"] = (C, P if b == 0 else C)
        shapes[f"{pre}.res.bn.gamma"] = (C,)
        shapes[f"{pre}.res.bn.beta"] = (C,)
    shapes["epilogue.dw.weight"] = (C, cfg.epilogue_kernel)
    shapes["epilogue.pw.weight"] = (E, C)
    shapes["epilogue.bn.gamma"] = (E,)
    shapes["epilogue.bn.beta"] = (E,)
    shapes["decoder.fc1.weight"] = (H, 2 * E)
    shapes["decoder.fc1.bias"] = (H,)
    shapes["decoder.fc2.weight"] = (cfg.num_classes, H)
    shapes["decoder.fc2.bias"] = (cfg.num_classes,)
    return shapes


def param_count_formula(cfg):
    """Closed-form scalar parameter count (BatchNorm running statistics excluded)."""
    C, E, H, K, M = cfg.channels, cfg.epilogue_channels, cfg.hidden_dim, cfg.num_classes, cfg.n_mels
    P, cb, R = cfg.prologue_out, cfg.se_bottleneck, cfg.repeats
    prologue = M * cfg.prologue_kernel + M * P + 2 * P
    blocks = 0
    for b, k in enumerate(cfg.mega_kernel_sizes):
        cin = P if b == 0 else C
        convs = (cin * k + C * cin) + (R - 1) * (C * k + C * C) + R * 2 * C
        se = 2 * C * cb + cb + C
        residual = C * cin + 2 * C
        blocks += convs + se + residual
    epilogue = C * cfg.epilogue_kernel + C * E + 2 * E
    decoder = 2 * E * H + H + H * K + K
    return prologue + blocks + epilogue + decoder


def count_flops(cfg, num_frames):
    """Analytic floating-point operation count of the frame-proportional part of one forward pass.

    Covers every per-frame op of the encoder plus stats pooling (multiply-adds
    count as two). The SE bottleneck MLPs and decoder linears run once per item
    and are reported by :func:`fixed_flops`.
    """
    C, E, M, P = cfg.channels, cfg.epilogue_channels, cfg.n_mels, cfg.prologue_out

    def sep(cin, cout, k):
        return 2 * cin * k + 2 * cin * cout

    bn_relu = 3  # scale-shift + max
    per_frame = sep(M, P, cfg.prologue_kernel) + P * bn_relu
    for b, k in enumerate(cfg.mega_kernel_sizes):
        cin = P if b == 0 else C
        per_frame += sep(cin, C, k) + (cfg.repeats - 1) * sep(C, C, k) + cfg.repeats * C * bn_relu
        per_frame += C          # SE time-average accumulation
        per_frame += C          # channel rescale
        per_frame += 2 * cin * C + 2 * C  # residual projection + BN
        per_frame += 2 * C      # residual add + ReLU
    per_frame += sep(C, E, cfg.epilogue_kernel) + E * bn_relu
    per_frame += 4 * E          # mean and variance accumulation
    return per_frame * int(num_frames)


def fixed_flops(cfg):
    """Per-item operations independent of the frame count (SE MLPs, pooling finish, decoder)."""
    C, E, H, K, cb = cfg.channels, cfg.epilogue_channels, cfg.hidden_dim, cfg.num_classes, cfg.se_bottleneck
    se = cfg.num_blocks * (2 * C * cb + 2 * cb * C + 2 * cb + 4 * C)
    return se + 4 * E + 2 * (2 * E) * H + H + 2 * H * K


def _kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_param(rng, name, shape):
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith(".beta") or name.endswith(".bias"):
        return np.zeros(shape)
    return _kaiming_uniform(rng, shape)


class Model:
    """Instantiated parameter store plus the forward graph.

    ``params`` maps stable hierarchical names to leaf tensors, ``buffers`` holds
    BatchNorm running statistics, and ``frozen_names`` lists parameters the
    optimizer must skip.
    """

    def __init__(self, config, params, buffers, frozen_names=()):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.frozen_names = set(frozen_names)
        for name, t in self.params.items():
            t.name = name
            t.requires_grad = name not in self.frozen_names

    # --- bookkeeping -----------------------------------------------------
    @property
    def decoder_names(self):
        return [n for n in self.params if n.startswith(DECODER_PREFIX)]

    @property
    def encoder_names(self):
        return [n for n in self.params if not n.startswith(DECODER_PREFIX)]

    @property
    def encoder_frozen(self):
        enc = self.encoder_names
        return bool(enc) and all(n in self.frozen_names for n in enc)

    def trainable(self):
        return {n: t for n, t in self.params.items() if n not in self.frozen_names}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def copy(self):
        params = {n: Tensor(t.data.copy()) for n, t in self.params.items()}
        buffers = {n: b.copy() for n, b in self.buffers.items()}
        return Model(self.config, params, buffers, self.frozen_names)

    def state_arrays(self):
        return {n: t.data for n, t in self.params.items()}

    # --- layers ----------------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _bn(self, x, prefix, mask, training, relu=False):
        op = F.batchnorm_relu if relu else F.batchnorm1d
        return op(
            x, self._p(f"{prefix}.gamma"), self._p(f"{prefix}.beta"),
            self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
            training=training, mask=mask,
        )

    def _separable(self, x, prefix, mask):
        x = F.mask_time(x, mask)
        x = F.conv1d_depthwise(x, self._p(f"{prefix}.dw.weight"))
        return F.conv1d_pointwise(x, self._p(f"{prefix}.pw.weight"))

    def se_block(self, b, x, mask=None):
        """Squeeze-and-excitation of mega-block ``b``: masked time average -> bottleneck MLP -> sigmoid gate."""
        pre = f"blocks.{b}.se"
        s = F.global_avg_pool_time(x, mask)
        s = F.relu(F.linear(s, self._p(f"{pre}.fc1.weight"), self._p(f"{pre}.fc1.bias")))
        s = F.sigmoid(F.linear(s, self._p(f"{pre}.fc2.weight"), self._p(f"{pre}.fc2.bias")))
        return F.scale_channels(x, s)

    def _trunk(self, x, mask, training, rng=None):
        """Encoder up to the epilogue convolution (before its batch norm)."""
        cfg = self.config
        h = self._bn(self._separable(x, "prologue", mask), "prologue.bn", mask, training, relu=True)
        for b in range(cfg.num_blocks):
            block_in = h
            for r in range(cfg.repeats):
                pre = f"blocks.{b}.sub.{r}"
                h = self._bn(self._separable(h, pre, mask), f"{pre}.bn", mask, training, relu=True)
                h = F.dropout(h, cfg.dropout_p, training, rng)
            h = self.se_block(b, h, mask)
            res = F.conv1d_pointwise(F.mask_time(block_in, mask), self._p(f"blocks.{b}.res.pw.weight"))
            res = self._bn(res, f"blocks.{b}.res.bn", mask, training)
            h = F.relu(F.add(h, res))
        return self._separable(h, "epilogue", mask)

    def encode(self, x, mask, training, rng=None):
        """Frame-level encoder output ``[N, epilogue_channels, T]``."""
        return self._bn(self._trunk(x, mask, training, rng), "epilogue.bn", mask, training, relu=True)

    def _encode_pooled(self, x, mask, training, rng=None):
        # Same as stats_pool(encode(...)), fused so the widest activation is never stored.
        return F.batchnorm_relu_stats_pool(
            self._trunk(x, mask, training, rng), self._p("epilogue.bn.gamma"), self._p("epilogue.bn.beta"),
            self.buffers["epilogue.bn.running_mean"], self.buffers["epilogue.bn.running_var"],
            training=training, mask=mask,
        )

    def decode(self, encoded, mask, training, rng=None):
        return self._head(F.stats_pool(encoded, mask), training, rng)

    def _head(self, z, training, rng=None):
        z = F.relu(F.linear(z, self._p("decoder.fc1.weight"), self._p("decoder.fc1.bias")))
        z = F.dropout(z, self.config.decoder_dropout_p, training, rng)
        return F.linear(z, self._p("decoder.fc2.weight"), self._p("decoder.fc2.bias"))

    def _prepare(self, features, mask):
        if isinstance(features, list):
            features, mask = batch_features(features)
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim == 2:
            x = Tensor(x.data[None])
        if x.ndim != 3 or x.shape[1] != self.config.n_mels:
            raise DimensionError(f"expected [N, {self.config.n_mels}, T] features, got {x.shape}")
        if mask is None:
            mask = SequenceMask.full(x.shape[0], x.shape[2])
        return x, mask

    def forward(self, features, mask=None, mode="eval", seed=None, rng=None):
        """Logits ``[N, num_classes]`` for a padded ``[N, n_mels, T]`` batch.

        ``mode="train"`` uses batch statistics and dropout; with a frozen encoder
        the encoder always runs in eval mode without recording a graph.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x, mask = self._prepare(features, mask)
        training = mode == "train"
        if rng is None:
            rng = np.random.default_rng(seed)
        if training and self.encoder_frozen:
            with no_grad():
                pooled = self._encode_pooled(x, mask, False)
        else:
            pooled = self._encode_pooled(x, mask, training, rng)
        return self._head(pooled, training, rng)

    def embed(self, features, mask=None):
        """Eval-mode pooled statistics ``[N, 2 * epilogue_channels]`` as a plain array.

        ``classify(embed(x))`` equals ``forward(x)`` in eval mode, and also in
        train mode when the encoder is frozen, so a frozen encoder's output can
        be computed once and reused.
        """
        x, mask = self._prepare(features, mask)
        with no_grad():
            return self._encode_pooled(x, mask, False).data

    def classify(self, pooled, mode="eval", seed=None, rng=None):
        """Decoder logits from pooled statistics (see :meth:`embed`)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if rng is None:
            rng = np.random.default_rng(seed)
        return self._head(Tensor(np.asarray(pooled, dtype=np.float64)), mode == "train", rng)

    __call__ = forward

    def count_params(self):
        return int(sum(t.data.size for t in self.params.values()))


def batch_features(features):
    """Zero-pad a list of :class:`FeatureMatrix` (or ``[n_mels, T]`` arrays) into ``[N, n_mels, T]`` + mask."""
    arrays = [getattr(f, "mels", f) for f in features]
    if not arrays:
        raise DimensionError("empty feature batch")
    n_mels = arrays[0].shape[0]
    lengths = [a.shape[1] for a in arrays]
    out = np.zeros((len(arrays), n_mels, max(lengths)))
    for i, a in enumerate(arrays):
        if a.shape[0] != n_mels:
            raise DimensionError("feature matrices disagree on n_mels")
        out[i, :, :a.shape[1]] = a
    return out, SequenceMask(tuple(lengths), max(lengths))


def _bn_buffers(shapes):
    buffers = {}
    for name, shape in shapes.items():
        if name.endswith(".bn.gamma"):
            pre = name[: -len(".gamma")]
            buffers[f"{pre}.running_mean"] = np.zeros(shape)
            buffers[f"{pre}.running_var"] = np.ones(shape)
    return buffers


def build_model(cfg, seed=0):
    """Instantiate ``cfg`` with Kaiming-uniform (fan-in) weights, deterministic in ``seed``."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    cfg.validate()
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {name: Tensor(_init_param(rng, name, shape), requires_grad=True)
              for name, shape in shapes.items()}
    return Model(cfg, params, _bn_buffers(shapes))


def forward(model, features, mask=None, mode="eval", seed=None):
    return model.forward(features, mask, mode=mode, seed=seed)


def count_params(model):
    return model.count_params()


def replace_head(model, new_num_classes, seed=0):
    """New model whose final linear layer has ``new_num_classes`` outputs; everything else copied bit-exactly."""
    if new_num_classes < 2:
        raise ConfigError("a classifier head needs at least 2 classes")
    out = model.copy()
    out.config = replace(model.config, num_classes=int(new_num_classes))
    rng = np.random.default_rng(seed)
    hidden = out.config.hidden_dim
    out.params["decoder.fc2.weight"] = Tensor(_kaiming_uniform(rng, (new_num_classes, hidden)))
    out.params["decoder.fc2.bias"] = Tensor(np.zeros(new_num_classes))
    return Model(out.config, out.params, out.buffers, out.frozen_names)


def freeze_encoder(model):
    """Copy of ``model`` with every non-decoder parameter frozen (its BatchNorm then runs in eval mode)."""
    out = model.copy()
    return Model(out.config, out.params, out.buffers, set(out.encoder_names))


def with_dropout(model, dropout_p=None, decoder_dropout_p=None):
    """Same parameters (shared, not copied) under a config with different dropout rates."""
    changes = {}
    if dropout_p is not None:
        changes["dropout_p"] = dropout_p
    if decoder_dropout_p is not None:
        changes["decoder_dropout_p"] = decoder_dropout_p
    return Model(replace(model.config, **changes), model.params, model.buffers, model.frozen_names)


__all__ = [
    "Model", "ModelConfig", "batch_features", "build_model", "count_flops", "count_params",
    "fixed_flops", "forward", "freeze_encoder", "param_count_formula", "param_shapes",
    "replace_head", "with_dropout",
]
