"""
Geometry-conditioned acoustic field.

Inputs per example: source and receiver positions (normalized by the room's
bounding box) and ``K`` bounce points. Each bounce point is described by its
offsets from the source and from the receiver; a shared projector maps those to
``d`` features that are mean-pooled over the set. The trunk consumes
``[enc(src), enc(rcv), pooled]`` and a linear head emits the whole ``T x F``
log-magnitude spectrogram.

Layers are ``projector -> fusion -> trunk0..trunkN-1 -> head``. LoRA adapters
attach to the square ``trunk*`` layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import InvalidInput, NumericalError, RankError, ShapeError
from ..geometry import BoundingBox, BouncePointSet
from ..rir import ImpulseResponse
from . import autodiff as ad
from .spectral import LOG_EPS, griffin_lim, log_magnitude, num_frames

DECAY_WEIGHT = 0.1


@dataclass(frozen=True)
class FieldConfig:
    num_bounce_points: int = 64
    encoding_levels: int = 8
    hidden_width: int = 256
    hidden_layers: int = 4
    win: int = 256
    hop: int = 128
    n_fft: int = 256
    rir_length: int = 9600
    sample_rate: int = 16000
    # bounce offsets are in meters divided by this, so absolute room size survives
    offset_scale_m: float = 10.0

    def __post_init__(self):
        for name in ("num_bounce_points", "encoding_levels", "hidden_width", "win", "hop", "n_fft", "rir_length", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_layers < 0 or self.offset_scale_m <= 0:
            raise ValueError("hidden_layers must be >= 0 and offset_scale_m > 0")
        if self.win > self.n_fft:
            raise ValueError("window longer than FFT size")

    @property
    def frames(self) -> int:
        return num_frames(self.rir_length, self.hop)

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def enc_dim(self) -> int:
        return 6 * self.encoding_levels

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """``(name, d_out, d_in)`` per dense layer, in forward order."""
        e, d = self.enc_dim, self.hidden_width
        shapes = [("projector", d, 2 * e), ("fusion", d, 2 * e + d)]
        shapes += [(f"trunk{i}", d, d) for i in range(self.hidden_layers)]
        shapes.append(("head", self.frames * self.bins, d))
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FieldConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Dense:
    name: str
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)


@dataclass
class ModelParams:
    config: FieldConfig
    layers: list[Dense]

    def layer(self, name: str) -> Dense:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [Dense(l.name, l.weight.copy(), l.bias.copy()) for l in self.layers])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.layers:
            out[f"{l.name}.weight"] = l.weight
            out[f"{l.name}.bias"] = l.bias
        return out


@dataclass
class LoraPair:
    A: np.ndarray  # (d_in, r)
    B: np.ndarray  # (d_out, r)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self.B @ self.A.T


@dataclass
class LoraAdapter:
    rank: int
    pairs: dict[str, LoraPair] = field(default_factory=dict)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.rank, {k: LoraPair(p.A.copy(), p.B.copy()) for k, p in self.pairs.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.pairs.items():
            out[f"{name}.lora_A"] = p.A
            out[f"{name}.lora_B"] = p.B
        return out


def init_params(config: FieldConfig, seed: int, output_bias: np.ndarray | None = None) -> ModelParams:
    """
    Random initialization; weights ~ N(0, 1/d_in), biases zero.

    ``output_bias`` optionally seeds the head bias (e.g. with the mean training
    spectrogram) so training starts near the data.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for name, d_out, d_in in config.layer_shapes():
        w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        b = np.zeros(d_out)
        if name == "head":
            w *= 0.1
            if output_bias is not None:
                b = np.asarray(output_bias, dtype=np.float64).reshape(d_out).copy()
        layers.append(Dense(name, w, b))
    return ModelParams(config, layers)


def lora_layer_names(config: FieldConfig) -> list[str]:
    return [f"trunk{i}" for i in range(config.hidden_layers)]


def lora_init(params: ModelParams, r: int, seed: int, std: float = 0.01) -> LoraAdapter:
    """A ~ N(0, std^2), B = 0 on every trunk layer, so the adapted model starts equal to the base."""
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter(r)
    for name in lora_layer_names(params.config):
        l = params.layer(name)
        d_out, d_in = l.weight.shape
        if r < 1 or r > min(d_in, d_out):
            raise RankError(f"rank {r} invalid for {name} ({d_out}x{d_in})")
        adapter.pairs[name] = LoraPair(rng.standard_normal((d_in, r)) * std, np.zeros((d_out, r)))
    return adapter


def merge_lora(params: ModelParams, adapter: LoraAdapter) -> ModelParams:
    """Materialize ``W + B A^T`` into a plain parameter set."""
    out = params.copy()
    for l in out.layers:
        if l.name in adapter.pairs:
            l.weight = l.weight + adapter.pairs[l.name].delta()
    return out


# --- inputs -----------------------------------------------------------------


def sinusoidal_encode(p, levels: int) -> np.ndarray:
    """
    ``[sin(2^l pi x), cos(2^l pi x)]`` for every axis and level ``l < levels``.

    Accepts (..., 3) arrays; returns (..., 6 * levels) ordered axis-major, then
    level, then (sin, cos).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise InvalidInput(f"expected 3-D coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInput("non-finite coordinates")
    freqs = (2.0 ** np.arange(levels)) * np.pi
    ang = p[..., :, None] * freqs  # (..., 3, L)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, L, 2)
    return enc.reshape(*p.shape[:-1], 6 * levels)


@dataclass(frozen=True)
class FieldInput:
    """Encoded features for a batch of examples."""

    pair: np.ndarray  # (N, 2 * enc)
    bounce: np.ndarray  # (N, K, 2 * enc)

    def __len__(self):
        return self.pair.shape[0]

    def subset(self, idx) -> "FieldInput":
        return FieldInput(self.pair[idx], self.bounce[idx])

    @staticmethod
    def stack(items: Sequence["FieldInput"]) -> "FieldInput":
        return FieldInput(np.concatenate([i.pair for i in items]), np.concatenate([i.bounce for i in items]))


def encode_inputs(config: FieldConfig, src, rcv, bounce: BouncePointSet | np.ndarray, bbox: BoundingBox) -> FieldInput:
    """Features for one or more (src, rcv) pairs sharing a room."""
    pts = np.asarray(getattr(bounce, "points", bounce), dtype=np.float64)
    if pts.shape != (config.num_bounce_points, 3):
        raise ShapeError(f"expected {config.num_bounce_points} bounce points, got {pts.shape}")
    src = np.atleast_2d(np.asarray(src, dtype=np.float64))
    rcv = np.atleast_2d(np.asarray(rcv, dtype=np.float64))
    if src.shape != rcv.shape or src.shape[1] != 3:
        raise ShapeError("src and rcv must be matching (N, 3) arrays")
    L = config.encoding_levels
    pair = np.concatenate([sinusoidal_encode(bbox.normalize(src), L), sinusoidal_encode(bbox.normalize(rcv), L)], axis=1)
    off_s = (pts[None, :, :] - src[:, None, :]) / config.offset_scale_m
    off_r = (pts[None, :, :] - rcv[:, None, :]) / config.offset_scale_m
    bounce_feat = np.concatenate([sinusoidal_encode(off_s, L), sinusoidal_encode(off_r, L)], axis=2)
    return FieldInput(pair, bounce_feat)


# --- forward ----------------------------------------------------------------


def _check_finite(t: ad.Tensor, where: str) -> ad.Tensor:
    if not np.all(np.isfinite(t.value)):
        raise NumericalError(f"non-finite values in {where}")
    return t


def _dense(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor, lora: tuple[ad.Tensor, ad.Tensor] | None) -> ad.Tensor:
    y = ad.add(ad.matmul(x, ad.transpose(w)), b)
    if lora is not None:
        A, B = lora
        y = ad.add(y, ad.matmul(ad.matmul(x, A), ad.transpose(B)))
    return y


def build_graph(
    params: ModelParams,
    adapter: LoraAdapter | None,
    inputs: FieldInput,
    trainable: str = "none",
) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
    """
    Forward pass as an autodiff graph.

    ``trainable`` is ``"none"``, ``"base"`` (all dense weights) or ``"lora"``
    (adapter matrices only). Returns the (N, T, F) output and the leaf tensors
    that require gradients, keyed like :meth:`ModelParams.arrays`.
    """
    cfg = params.config
    e = cfg.enc_dim
    if inputs.pair.ndim != 2 or inputs.pair.shape[1] != 2 * e:
        raise ShapeError(f"pair features must be (N, {2 * e})")
    if inputs.bounce.shape[1:] != (cfg.num_bounce_points, 2 * e):
        raise ShapeError(f"bounce features must be (N, {cfg.num_bounce_points}, {2 * e})")
    leaves: dict[str, ad.Tensor] = {}
    base_grad = trainable == "base"
    lora_grad = trainable == "lora"

    def weights(name):
        l = params.layer(name)
        w = ad.Tensor(l.weight, requires_grad=base_grad, name=f"{name}.weight")
        b = ad.Tensor(l.bias, requires_grad=base_grad, name=f"{name}.bias")
        if base_grad:
            leaves[w.name], leaves[b.name] = w, b
        lora = None
        if adapter is not None and name in adapter.pairs:
            p = adapter.pairs[name]
            A = ad.Tensor(p.A, requires_grad=lora_grad, name=f"{name}.lora_A")
            B = ad.Tensor(p.B, requires_grad=lora_grad, name=f"{name}.lora_B")
            if lora_grad:
                leaves[A.name], leaves[B.name] = A, B
            lora = (A, B)
        return w, b, lora

    # smooth activation keeps the network C1, so finite-difference checks are well posed
    h = ad.softplus(_dense(ad.Tensor(inputs.bounce), *weights("projector")))
    pooled = _check_finite(ad.mean(h, axis=1), "projector")
    x = ad.concat([ad.Tensor(inputs.pair), pooled], axis=1)
    x = _check_finite(ad.softplus(_dense(x, *weights("fusion"))), "fusion")
    for name in lora_layer_names(cfg):
        x = _check_finite(ad.softplus(_dense(x, *weights(name))), name)
    out = _check_finite(_dense(x, *weights("head")), "head")
    out = ad.reshape(out, (len(inputs), cfg.frames, cfg.bins))
    return out, leaves


def forward(params: ModelParams, adapter: LoraAdapter | None, inputs: FieldInput) -> np.ndarray:
    """Predicted log-magnitude spectrograms, shape (N, T, F)."""
    out, _ = build_graph(params, adapter, inputs)
    return out.value


def predict(params: ModelParams, adapter: LoraAdapter | None, src, rcv, bounce, bbox: BoundingBox) -> np.ndarray:
    """Single-pair convenience wrapper returning a (T, F) grid."""
    return forward(params, adapter, encode_inputs(params.config, src, rcv, bounce, bbox))[0]


# --- loss -------------------------------------------------------------------


def decay_profile(values: np.ndarray) -> np.ndarray:
    """
    Frame-domain Schroeder curve of a log-magnitude grid: natural log of the
    backward-summed frame energy, relative to the total. Invariant to adding a
    constant to every bin.
    """
    v = np.asarray(values, dtype=np.float64)
    e = np.exp(2.0 * (v - v.max(axis=(-2, -1), keepdims=True))).sum(axis=-1)
    c = np.flip(np.cumsum(np.flip(e, -1), -1), -1)
    return np.log(c) - np.log(c[..., :1])


def _decay_profile_graph(pred: ad.Tensor) -> ad.Tensor:
    # shifting by a constant leaves the profile unchanged, so the shift needs no gradient
    shift = pred.value.max(axis=(-2, -1), keepdims=True)
    e = ad.sum_(ad.exp(ad.mul(ad.sub(pred, shift), 2.0)), axis=-1)
    c = ad.reverse_cumsum(e, axis=-1)
    logc = ad.log(c)
    return ad.sub(logc, ad.take(logc, 0, axis=-1))


def loss_graph(pred: ad.Tensor, target: np.ndarray, decay_weight: float = DECAY_WEIGHT) -> ad.Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    spec_term = ad.mean(ad.absolute(ad.sub(pred, target)))
    decay_term = ad.mean(ad.absolute(ad.sub(_decay_profile_graph(pred), decay_profile(target))))
    return ad.add(spec_term, ad.mul(decay_term, decay_weight))


def loss(pred: np.ndarray, target: np.ndarray, decay_weight: float = DECAY_WEIGHT) -> float:
    """Mean |pred - target| plus ``decay_weight`` x mean |decay(pred) - decay(target)|."""
    return float(loss_graph(ad.Tensor(pred), target, decay_weight).value)


def gradients(
    params: ModelParams,
    adapter: LoraAdapter | None,
    inputs: FieldInput,
    targets: np.ndarray,
    mode: str = "base",
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Mean batch loss and its exact gradients.

    ``mode="base"`` differentiates every dense weight and bias; ``mode="lora"``
    differentiates only the adapter matrices, leaving base weights frozen.
    """
    if mode not in ("base", "lora"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "lora" and adapter is None:
        raise ValueError("lora mode needs an adapter")
    out, leaves = build_graph(params, adapter, inputs, trainable=mode)
    l = loss_graph(out, targets)
    if not np.isfinite(l.value):
        raise NumericalError("non-finite loss")
    l.backward()
    grads = {}
    for name, t in leaves.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.value)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        grads[name] = g
    return float(l.value), grads


# --- targets and synthesis --------------------------------------------------


def spectrogram_target(config: FieldConfig, ir: ImpulseResponse) -> np.ndarray:
    """Fixed-STFT log-magnitude of an RIR padded or cut to ``config.rir_length``."""
    x = ir.samples
    if x.size != config.rir_length:
        x = np.pad(x, (0, max(config.rir_length - x.size, 0)))[: config.rir_length]
    return log_magnitude(ImpulseResponse(x, ir.sample_rate), config.win, config.hop, config.n_fft)


def synthesize_waveform(config: FieldConfig, spec: np.ndarray, iterations: int = 32) -> ImpulseResponse:
    spec = np.asarray(spec)
    if spec.shape != (config.frames, config.bins):
        raise ShapeError(f"spectrogram must be {(config.frames, config.bins)}, got {spec.shape}")
    return griffin_lim(spec, config.rir_length, config.sample_rate, config.win, config.hop, config.n_fft, iterations, LOG_EPS)
