"""The mixture-of-experts saliency network.

A shared convolutional trunk produces feature stages; selected stage
outputs are concatenated and fed to K expert heads (two convolutions
each) that emit one saliency map per category. Each expert map is
multiplied elementwise by its upscaled per-category center-bias grid,
and the final map is the convex blend of the biased maps under the
gating classifier's temperature-softened class probabilities:

    saliency(i) = sum_k  expert_k(i) * bias_k(i) * gate_k

The gating branch reads the input image average-pooled by a fixed
factor, runs its own conv/pool stack and two dense layers, and its
logits are read out twice: once at the configured temperature (blend
weights) and once at temperature 1 (classification loss).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, UsageError

CHECKPOINT_MAGIC = b"MOES"
CHECKPOINT_VERSION = 1

# Guard for the per-image max normalizer in the saliency loss: an
# all-nonpositive prediction would otherwise divide by ~0.
EPSILON_NORM = 1e-8
# Probability floor inside the classification log.
EPSILON_LOG = 1e-12


@dataclass(frozen=True)
class PoolSpec:
    """Max pooling after a trunk/gating stage."""

    window: int = 2
    stride: int = 2
    same_pad: bool = False  # pad right/bottom so extent only shrinks by /stride


@dataclass(frozen=True)
class StageSpec:
    """One trunk stage: a run of 3x3 convolutions, optionally pooled."""

    convs: tuple[int, ...]
    pool: PoolSpec | None = None
    kernel: int = 3


@dataclass(frozen=True)
class ModelConfig:
    input_h: int
    input_w: int
    input_channels: int
    trunk_stages: tuple[StageSpec, ...]
    concat_stages: tuple[int, ...]
    num_experts: int
    expert_conv1_filters: int
    expert_conv2_filters: int
    gating_downsample: int
    gating_convs: tuple[int, ...]
    gating_hidden: int
    tau: float = 10.0
    lambda_s: float = 10.0
    lambda_c: float = 1.0
    lambda_cb: float = 1.0
    alpha: float = 1.1
    cb_w: int = 8
    cb_h: int = 6

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigurationError("num_experts must be >= 1")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.alpha <= 1.0:
            raise ConfigurationError(
                "alpha must exceed 1 (ground truth is normalized to [0, 1])"
            )
        if min(self.lambda_s, self.lambda_c, self.lambda_cb) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if not self.concat_stages:
            raise ConfigurationError("concat_stages must be nonempty")
        for idx in self.concat_stages:
            if not 0 <= idx < len(self.trunk_stages):
                raise ConfigurationError(f"concat stage index {idx} out of range")
        if self.cb_w < 1 or self.cb_h < 1:
            raise ConfigurationError("center-bias grid extents must be positive")
        if self.expert_conv1_filters < 1 or self.expert_conv2_filters < 1:
            raise ConfigurationError("expert head widths must be positive")
        if self.input_h % self.gating_downsample or self.input_w % self.gating_downsample:
            raise ConfigurationError(
                f"gating_downsample {self.gating_downsample} must divide the "
                f"input extent {self.input_h}x{self.input_w}"
            )
        shapes = self.stage_shapes()
        ref = shapes[self.concat_stages[0]]
        for idx in self.concat_stages[1:]:
            if shapes[idx] != ref:
                raise ConfigurationError(
                    f"concat stages have mismatched extents: stage "
                    f"{self.concat_stages[0]} is {ref}, stage {idx} is {shapes[idx]}"
                )

    def stage_shapes(self) -> list[tuple[int, int]]:
        """Spatial extent of each trunk stage output (post pooling)."""
        h, w = self.input_h, self.input_w
        shapes = []
        for stage in self.trunk_stages:
            if stage.pool is not None:
                p = stage.pool
                if p.same_pad:
                    h = -(-h // p.stride)
                    w = -(-w // p.stride)
                else:
                    h = (h - p.window) // p.stride + 1
                    w = (w - p.window) // p.stride + 1
            if h < 1 or w < 1:
                raise ConfigurationError("trunk pooling exhausts the spatial extent")
            shapes.append((h, w))
        return shapes

    def output_shape(self) -> tuple[int, int]:
        """Extent of the predicted saliency map."""
        return self.stage_shapes()[self.concat_stages[0]]

    def gating_feature_size(self) -> int:
        h = self.input_h // self.gating_downsample
        w = self.input_w // self.gating_downsample
        for _ in self.gating_convs:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigurationError("gating pooling exhausts the spatial extent")
        return (self.gating_convs[-1] if self.gating_convs else self.input_channels) * h * w

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "input_h": self.input_h,
            "input_w": self.input_w,
            "input_channels": self.input_channels,
            "trunk_stages": [
                {
                    "convs": list(s.convs),
                    "kernel": s.kernel,
                    "pool": None
                    if s.pool is None
                    else {
                        "window": s.pool.window,
                        "stride": s.pool.stride,
                        "same_pad": s.pool.same_pad,
                    },
                }
                for s in self.trunk_stages
            ],
            "concat_stages": list(self.concat_stages),
            "num_experts": self.num_experts,
            "expert_conv1_filters": self.expert_conv1_filters,
            "expert_conv2_filters": self.expert_conv2_filters,
            "gating_downsample": self.gating_downsample,
            "gating_convs": list(self.gating_convs),
            "gating_hidden": self.gating_hidden,
            "tau": self.tau,
            "lambda_s": self.lambda_s,
            "lambda_c": self.lambda_c,
            "lambda_cb": self.lambda_cb,
            "alpha": self.alpha,
            "cb_w": self.cb_w,
            "cb_h": self.cb_h,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "ModelConfig":
        doc = dict(doc)
        stages = []
        for raw in doc.pop("trunk_stages"):
            raw = dict(raw)
            pool_doc = raw.pop("pool")
            pool = None if pool_doc is None else PoolSpec(**pool_doc)
            stages.append(StageSpec(convs=tuple(raw.pop("convs")), pool=pool, **raw))
        for key in ("concat_stages", "gating_convs"):
            doc[key] = tuple(doc[key])
        known = set(ModelConfig.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(trunk_stages=tuple(stages), **doc)

    def canonical_json(self) -> bytes:
        return json.dumps(
            self.to_json_dict(), sort_keys=True, separators=(",", ":")
        ).encode("utf-8")


def paper_scale() -> ModelConfig:
    """Full-size configuration: 480x640 input, VGG16-shape trunk, 20 experts.

    Never trained here (that needs pretrained weights and the real
    datasets); it exists so the layer census and parameter bookkeeping
    can be pinned against the published table. The stride-1 fourth pool
    uses edge padding so the last three stage outputs share one extent.
    """
    return ModelConfig(
        input_h=480,
        input_w=640,
        input_channels=3,
        trunk_stages=(
            StageSpec(convs=(64, 64), pool=PoolSpec(2, 2)),
            StageSpec(convs=(128, 128), pool=PoolSpec(2, 2)),
            StageSpec(convs=(256, 256, 256), pool=PoolSpec(2, 2)),
            StageSpec(convs=(512, 512, 512), pool=PoolSpec(2, 1, same_pad=True)),
            StageSpec(convs=(512, 512, 512), pool=None),
        ),
        concat_stages=(2, 3, 4),
        num_experts=20,
        expert_conv1_filters=64,
        expert_conv2_filters=16,
        gating_downsample=4,
        gating_convs=(32, 64, 128, 128),
        gating_hidden=128,
        tau=10.0,
        lambda_s=10.0,
        lambda_c=1.0,
        lambda_cb=1.0,
        alpha=1.1,
        cb_w=8,
        cb_h=6,
    )


def desk_scale(num_experts: int = 4) -> ModelConfig:
    """Shrunken configuration that trains in minutes on one core.

    48x64 grayscale input, a two-stage trunk whose outputs concatenate
    at half resolution, and a two-conv gating branch. Saliency maps
    come out at input/2.
    """
    return ModelConfig(
        input_h=48,
        input_w=64,
        input_channels=1,
        trunk_stages=(
            StageSpec(convs=(8,), pool=PoolSpec(2, 2)),
            StageSpec(convs=(12,), pool=None),
        ),
        concat_stages=(0, 1),
        num_experts=num_experts,
        expert_conv1_filters=8,
        expert_conv2_filters=1,
        gating_downsample=2,
        gating_convs=(8, 16),
        gating_hidden=32,
        tau=10.0,
        lambda_s=10.0,
        lambda_c=1.0,
        lambda_cb=1.0,
        alpha=1.1,
        cb_w=4,
        cb_h=3,
    )


def layer_census(config: ModelConfig) -> list[str]:
    """Human-readable layer table derived from the configuration.

    One line per layer as ``section | name | hyper parameters``; the
    full-size preset reproduces the published parameter table verbatim,
    which the golden-file test pins.
    """
    rows = [("trunk", "Input", f"{config.input_h} x {config.input_w} pixels")]
    for si, stage in enumerate(config.trunk_stages, start=1):
        for ci, filters in enumerate(stage.convs, start=1):
            rows.append(
                (
                    "trunk",
                    f"Conv{si}-{ci}",
                    f"{filters} ({stage.kernel} x {stage.kernel}) filters",
                )
            )
        if stage.pool is not None:
            suffix = "" if stage.pool.stride == stage.pool.window else (
                f" (stride {stage.pool.stride})"
            )
            rows.append(
                (
                    "trunk",
                    f"Pool{si}",
                    f"{stage.pool.window} x {stage.pool.window} max pooling{suffix}",
                )
            )
    rows.append(("experts", "Conv-E-1", f"{config.expert_conv1_filters} (3 x 3) filters"))
    rows.append(("experts", "Conv-E-2", f"{config.expert_conv2_filters} (1 x 1) filters"))
    rows.append(("experts", "Center bias", f"{config.cb_w} x {config.cb_h} parameters"))
    gh = config.input_h // config.gating_downsample
    gw = config.input_w // config.gating_downsample
    rows.append(("gating", "Input", f"{gh} x {gw} pixels"))
    for gi, filters in enumerate(config.gating_convs, start=1):
        rows.append(("gating", f"Conv-G-{gi}", f"{filters} (3 x 3) filters"))
        rows.append(("gating", f"Pool-G-{gi}", "2 x 2 max pooling"))
    rows.append(("gating", "Full1", f"{config.gating_hidden} units"))
    rows.append(("gating", "Full2", f"{config.num_experts} units"))
    return [f"{section} | {name} | {hyper}" for section, name, hyper in rows]


@dataclass
class ModelOutput:
    """Everything the forward pass exposes for losses and inspection."""

    saliency: Tensor  # (N, 1, h, w) mixture prediction
    expert_maps: Tensor  # (N, K, h, w) raw per-expert maps
    biased_expert_maps: Tensor  # (N, K, h, w) after center-bias modulation
    upscaled_bias: Tensor  # (K, h, w) bias grids at map resolution
    gate_probs_tau: Tensor  # (N, K) blend weights at the configured temperature
    gate_probs_1: Tensor  # (N, K) classification probabilities at temperature 1
    gate_logits: Tensor  # (N, K)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class MixtureModel:
    """Built network: parameter tensors plus the forward computation."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng([seed, 0x6D6F65])  # weight-init stream
        self._params: list[Tensor] = []

        def param(name: str, values: np.ndarray) -> Tensor:
            t = Tensor(values, requires_grad=True, name=name)
            self._params.append(t)
            return t

        def conv_pair(name: str, f: int, c: int, k: int):
            w = param(
                f"{name}.w", _glorot(rng, (f, c, k, k), fan_in=c * k * k, fan_out=f * k * k)
            )
            b = param(f"{name}.b", np.zeros(f))
            return w, b

        self.trunk: list[list[tuple[Tensor, Tensor]]] = []
        channels = config.input_channels
        for si, stage in enumerate(config.trunk_stages):
            layers = []
            for ci, filters in enumerate(stage.convs):
                layers.append(conv_pair(f"trunk.s{si}.c{ci}", filters, channels, stage.kernel))
                channels = filters
            self.trunk.append(layers)

        concat_channels_total = sum(
            config.trunk_stages[i].convs[-1] for i in config.concat_stages
        )
        self.experts: list[tuple[Tensor, Tensor, Tensor, Tensor]] = []
        for k in range(config.num_experts):
            w1, b1 = conv_pair(f"expert{k}.c1", config.expert_conv1_filters, concat_channels_total, 3)
            w2, b2 = conv_pair(f"expert{k}.c2", config.expert_conv2_filters, config.expert_conv1_filters, 1)
            self.experts.append((w1, b1, w2, b2))

        # center bias starts at all ones: no location preference
        self.center_bias = param(
            "center_bias", np.ones((config.num_experts, config.cb_h, config.cb_w))
        )

        self.gating_convs: list[tuple[Tensor, Tensor]] = []
        channels = config.input_channels
        for gi, filters in enumerate(config.gating_convs):
            self.gating_convs.append(conv_pair(f"gating.c{gi}", filters, channels, 3))
            channels = filters
        feat = config.gating_feature_size()
        self.gating_fc1 = (
            param("gating.fc1.w", _glorot(rng, (feat, config.gating_hidden), feat, config.gating_hidden)),
            param("gating.fc1.b", np.zeros(config.gating_hidden)),
        )
        self.gating_fc2 = (
            param(
                "gating.fc2.w",
                _glorot(rng, (config.gating_hidden, config.num_experts), config.gating_hidden, config.num_experts),
            ),
            param("gating.fc2.b", np.zeros(config.num_experts)),
        )

    # -- parameter access ------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def parameter_names(self) -> list[str]:
        return [p.name for p in self._params]

    def zero_grad(self) -> None:
        ad.zero_grad(self._params)

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self._params]

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self._params):
            raise UsageError(
                f"state has {len(arrays)} arrays, model has {len(self._params)}"
            )
        for p, a in zip(self._params, arrays):
            if p.data.shape != a.shape:
                raise UsageError(f"shape mismatch for {p.name}: {a.shape}")
            p.data = a.astype(np.float64).copy()

    # -- forward -----------------------------------------------------------

    def forward(self, images, bypass_center_bias: bool = False) -> ModelOutput:
        """Run the network on a batch (N, C, H, W).

        ``bypass_center_bias`` skips the bias multiplication entirely
        (diagnostic path used to verify neutrality at initialization).
        """
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_h, cfg.input_w):
            raise UsageError(
                f"expected images (N, {cfg.input_channels}, {cfg.input_h}, "
                f"{cfg.input_w}), got {x.shape}"
            )

        stage_outputs = []
        h = x
        for stage, layers in zip(cfg.trunk_stages, self.trunk):
            for (w, b), filters in zip(layers, stage.convs):
                h = ad.relu(ad.conv2d(h, w, b, stride=1, padding=(stage.kernel - 1) // 2))
            if stage.pool is not None:
                h = ad.maxpool2d(
                    h, stage.pool.window, stage.pool.stride, same_pad=stage.pool.same_pad
                )
            stage_outputs.append(h)
        features = ad.concat_channels([stage_outputs[i] for i in cfg.concat_stages])

        maps = []
        for w1, b1, w2, b2 in self.experts:
            e = ad.relu(ad.conv2d(features, w1, b1, stride=1, padding=1))
            m = ad.conv2d(e, w2, b2, stride=1, padding=0)
            if cfg.expert_conv2_filters > 1:
                m = ad.mean(m, axis=1, keepdims=True)
            maps.append(m)
        expert_maps = ad.concat_channels(maps)  # (N, K, h, w)

        map_h, map_w = cfg.output_shape()
        upscaled = ad.upsample_bilinear(self.center_bias, map_h, map_w)  # (K, h, w)
        biased = expert_maps if bypass_center_bias else ad.mul(expert_maps, upscaled)

        g = ad.avgpool2d(x, cfg.gating_downsample)
        for w, b in self.gating_convs:
            g = ad.relu(ad.conv2d(g, w, b, stride=1, padding=1))
            g = ad.maxpool2d(g, 2, 2)
        g = g.reshape(g.shape[0], -1)
        g = ad.relu(ad.dense(g, *self.gating_fc1))
        logits = ad.dense(g, *self.gating_fc2)
        gate_tau = ad.softmax_tempered(logits, cfg.tau)
        gate_1 = ad.softmax_tempered(logits, 1.0)

        n, k = gate_tau.shape
        weights = gate_tau.reshape(n, k, 1, 1)
        saliency = ad.sum_(ad.mul(weights, biased), axis=1, keepdims=True)

        return ModelOutput(
            saliency=saliency,
            expert_maps=expert_maps,
            biased_expert_maps=biased,
            upscaled_bias=upscaled,
            gate_probs_tau=gate_tau,
            gate_probs_1=gate_1,
            gate_logits=logits,
        )

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Full-resolution saliency maps (N, H, W), clamped below at 0.

        The raw mixture can go negative (expert maps have no output
        nonlinearity); exported/reported maps are clamped, the training
        loss sees the raw values.
        """
        out = self.forward(images)
        full = ad.upsample_bilinear(out.saliency, self.config.input_h, self.config.input_w)
        return np.maximum(full.data[:, 0], 0.0)

    def predict_gates(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images).gate_probs_tau.data.copy()

    # -- checkpoint io -------------------------------------------------------

    def save(self, path) -> None:
        config_json = self.config.canonical_json()
        digest = hashlib.sha256(config_json).digest()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(config_json)))
            fh.write(config_json)
            fh.write(digest)
            fh.write(struct.pack("<Q", sum(p.size for p in self._params)))
            for p in self._params:
                fh.write(p.data.astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "MixtureModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        pos = 0
        if blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
        pos = 4
        (version,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (config_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        config_json = blob[pos : pos + config_len]
        pos += config_len
        stored_digest = blob[pos : pos + 32]
        pos += 32
        if hashlib.sha256(config_json).digest() != stored_digest:
            raise FormatError("checkpoint config hash mismatch")
        config = ModelConfig.from_json_dict(json.loads(config_json))
        (total,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        model = MixtureModel(config, seed=0)
        expected = sum(p.size for p in model._params)
        if total != expected:
            raise FormatError(
                f"checkpoint holds {total} parameter values, config implies {expected}"
            )
        values = np.frombuffer(blob, dtype="<f8", count=total, offset=pos)
        if values.size != total:
            raise FormatError("truncated checkpoint parameter block")
        cursor = 0
        for p in model._params:
            p.data = values[cursor : cursor + p.size].reshape(p.shape).astype(np.float64)
            cursor += p.size
        return model


def build_model(config: ModelConfig, seed: int = 0) -> MixtureModel:
    return MixtureModel(config, seed=seed)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def saliency_loss(output: ModelOutput, y, config: ModelConfig) -> Tensor:
    """Normalized squared error plus the center-bias regularizer.

    The prediction is divided by its per-image maximum (subgradient to
    the argmax pixel; the normalizer is floored at EPSILON_NORM to
    survive an all-nonpositive map), the squared residual is weighted
    by 1/(alpha - y), and the bias term pulls the upscaled grids toward
    1 so the experts learn saliency rather than pure location priors.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    pred = output.saliency
    if y_arr.shape != pred.shape:
        raise UsageError(f"target shape {y_arr.shape} != prediction {pred.shape}")
    if config.alpha <= float(y_arr.max()):
        raise ConfigurationError(
            f"alpha {config.alpha} must exceed the ground-truth maximum {y_arr.max()}"
        )
    n = y_arr.shape[0]
    n_px = y_arr.shape[2] * y_arr.shape[3]

    denom = ad.clamp_min(ad.sample_max(pred), EPSILON_NORM)
    normalized = ad.div(pred, denom)
    weights = 1.0 / (config.alpha - y_arr)
    residual = ad.sub(normalized, y_arr)
    term1 = ad.mul(ad.mul(residual, residual), weights).sum() * (1.0 / (n * n_px))

    bias = output.upscaled_bias
    k = bias.shape[0]
    flat = ad.sub(1.0, bias)
    term2 = ad.mul(flat, flat).sum() * (config.lambda_cb / (k * n_px))
    return term1 + term2


def class_loss(output: ModelOutput, targets) -> Tensor:
    """Categorical cross entropy against the temperature-1 gate output."""
    t = np.asarray(targets, dtype=np.float64)
    probs = output.gate_probs_1
    if t.shape != probs.shape:
        raise UsageError(f"targets shape {t.shape} != gate output {probs.shape}")
    rows_ok = np.all(np.isin(t, (0.0, 1.0))) and np.all(t.sum(axis=1) == 1.0)
    if not rows_ok:
        raise UsageError("class targets must be one-hot rows")
    n = t.shape[0]
    logp = ad.log(ad.clamp_min(probs, EPSILON_LOG))
    return ad.mul(ad.mul(logp, t).sum(), -1.0 / n)


def total_loss(output: ModelOutput, y, targets, config: ModelConfig) -> Tensor:
    """Weighted sum of the saliency and classification losses."""
    loss = ad.mul(saliency_loss(output, y, config), config.lambda_s)
    if config.lambda_c > 0.0:
        if targets is None:
            raise UsageError("class targets required when lambda_c > 0")
        loss = loss + ad.mul(class_loss(output, targets), config.lambda_c)
    return loss


def one_hot(categories: Sequence[int], num_classes: int) -> np.ndarray:
    cats = np.asarray(categories, dtype=int)
    if cats.size and (cats.min() < 0 or cats.max() >= num_classes):
        raise UsageError(
            f"category ids must lie in [0, {num_classes}), got {cats.min()}..{cats.max()}"
        )
    out = np.zeros((len(cats), num_classes))
    out[np.arange(len(cats)), cats] = 1.0
    return out
