"""Feature encoder, Transformer student/teacher encoder and conv decoder.

All layers are written functionally over a name -> Tensor parameter dict so
the same code serves the student (trainable, stochastic) and the teacher
(EMA copy, always in inference mode). Shapes are time-major: ``(T, d_model)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import RngStream, Tensor, dropout, no_grad
from .autodiff import functional as F


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    dropout_rate: float = 0.1
    layerdrop_rate: float = 0.1
    decoder_layers: int = 2
    decoder_kernel: int = 3
    # (channels, kernel, stride) per stage; cumulative stride 160 = 10 ms at 16 kHz
    feature_encoder_spec: list = field(default_factory=lambda: [[32, 10, 5], [32, 8, 4], [64, 16, 8]])
    pos_encoding: str = "conv"
    pos_conv_kernel: int = 5
    max_frames: int = 1024

    def validate(self) -> "ModelConfig":
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        for name in ("dropout_rate", "layerdrop_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {rate}")
        if self.decoder_layers < 0 or self.decoder_kernel < 1 or self.ffn_mult < 1:
            raise ValueError("decoder_layers >= 0, decoder_kernel >= 1, ffn_mult >= 1 required")
        if not self.feature_encoder_spec:
            raise ValueError("feature_encoder_spec needs at least one stage")
        for stage in self.feature_encoder_spec:
            if len(stage) != 3 or min(stage) < 1 or stage[1] < stage[2]:
                raise ValueError(f"bad feature encoder stage {stage}: need (channels, kernel >= stride, stride)")
        if self.pos_encoding not in ("conv", "learned"):
            raise ValueError(f"pos_encoding must be 'conv' or 'learned', got {self.pos_encoding!r}")
        return self

    @property
    def total_stride(self) -> int:
        return math.prod(int(s[2]) for s in self.feature_encoder_spec)


def encoder_param_prefixes(cfg: ModelConfig) -> tuple[str, ...]:
    """Prefixes of the encoder-side parameters tracked by the teacher."""
    pos = ("pos_conv.",) if cfg.pos_encoding == "conv" else ("pos_embed",)
    return pos + ("encoder_ln.", "blocks.", "final_ln.")


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    cfg.validate()
    rng = RngStream(seed).split("init")
    dtype = np.float32
    params: dict[str, Tensor] = {}

    def dense(name: str, shape: tuple, fan_in: int, std: float | None = None):
        std = std if std is not None else 1.0 / math.sqrt(fan_in)
        params[name] = Tensor(rng.split(name).normal(shape) * std, requires_grad=True, dtype=dtype, name=name)

    def const(name: str, shape: tuple, value: float):
        params[name] = Tensor(np.full(shape, value), requires_grad=True, dtype=dtype, name=name)

    d = cfg.d_model
    cin = 1
    for i, (ch, k, _) in enumerate(cfg.feature_encoder_spec):
        dense(f"feature_encoder.conv{i}.weight", (k, cin, ch), k * cin)
        const(f"feature_encoder.conv{i}.bias", (ch,), 0.0)
        const(f"feature_encoder.conv{i}.ln.weight", (ch,), 1.0)
        const(f"feature_encoder.conv{i}.ln.bias", (ch,), 0.0)
        cin = ch
    dense("feature_encoder.proj.weight", (cin, d), cin)
    const("feature_encoder.proj.bias", (d,), 0.0)
    if cfg.pos_encoding == "conv":
        k = cfg.pos_conv_kernel
        dense("pos_conv.weight", (k, d, d), k * d)
        const("pos_conv.bias", (d,), 0.0)
    else:
        dense("pos_embed", (cfg.max_frames, d), d, std=0.02)
    const("encoder_ln.weight", (d,), 1.0)
    const("encoder_ln.bias", (d,), 0.0)
    hidden = cfg.ffn_mult * d
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        const(p + "ln1.weight", (d,), 1.0)
        const(p + "ln1.bias", (d,), 0.0)
        dense(p + "attn.qkv.weight", (d, 3 * d), d)
        # no key bias: softmax over keys is invariant to it, so it would never train
        const(p + "attn.q.bias", (d,), 0.0)
        const(p + "attn.v.bias", (d,), 0.0)
        dense(p + "attn.out.weight", (d, d), d)
        const(p + "attn.out.bias", (d,), 0.0)
        const(p + "ln2.weight", (d,), 1.0)
        const(p + "ln2.bias", (d,), 0.0)
        dense(p + "ffn.fc1.weight", (d, hidden), d)
        const(p + "ffn.fc1.bias", (hidden,), 0.0)
        dense(p + "ffn.fc2.weight", (hidden, d), hidden)
        const(p + "ffn.fc2.bias", (d,), 0.0)
    const("final_ln.weight", (d,), 1.0)
    const("final_ln.bias", (d,), 0.0)
    for j in range(cfg.decoder_layers):
        p = f"decoder.{j}."
        k = cfg.decoder_kernel
        dense(p + "conv.weight", (k, d, d), k * d)
        const(p + "conv.bias", (d,), 0.0)
        const(p + "ln.weight", (d,), 1.0)
        const(p + "ln.bias", (d,), 0.0)
    dense("mask_token", (d,), d, std=0.02)
    dense("final_proj.weight", (d, d), d)
    const("final_proj.bias", (d,), 0.0)
    return params


@dataclass
class SubModelPass:
    pass_id: int
    rng: RngStream
    kept_layers: tuple[int, ...]
    prediction: Tensor
    hidden_states: list[Tensor]


def layerdrop_sample(rng: RngStream, rate: float, n_layers: int) -> tuple[int, ...]:
    """Blocks kept by one LayerDrop draw; the top block survives an empty draw."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"layerdrop rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return tuple(range(n_layers))
    keep = rng.uniform(n_layers) >= rate
    kept = tuple(int(i) for i in np.flatnonzero(keep))
    return kept or (n_layers - 1,)


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


class Model:
    """Stateless network definition; parameters are passed in explicitly."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg.validate()

    # -- front end ------------------------------------------------------
    def num_frames(self, n_samples: int) -> int:
        return n_samples // self.cfg.total_stride

    def feature_encode(self, params: dict[str, Tensor], waveform) -> Tensor:
        """Strided conv stack mapping a 1-D waveform to ``(T, d_model)`` frames.

        Each stage pads on the right by ``kernel - stride`` so its output has
        exactly ``len // stride`` frames, making ``T = len // total_stride``.
        """
        wav = waveform.data if isinstance(waveform, Tensor) else np.asarray(waveform)
        if wav.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {wav.shape}")
        need = self.cfg.total_stride
        if wav.shape[0] < need:
            raise ValueError(f"waveform has {wav.shape[0]} samples; at least {need} required")
        dtype = params["feature_encoder.proj.weight"].dtype
        x = Tensor._wrap(np.ascontiguousarray(wav.reshape(-1, 1), dtype=dtype))
        for i, (_, k, s) in enumerate(self.cfg.feature_encoder_spec):
            p = f"feature_encoder.conv{i}."
            x = F.conv1d(x, params[p + "weight"], params[p + "bias"], stride=s, pad_right=k - s)
            x = F.gelu(F.layer_norm(x, params[p + "ln.weight"], params[p + "ln.bias"]))
        return F.linear(x, params["feature_encoder.proj.weight"], params["feature_encoder.proj.bias"])

    def position(self, params: dict[str, Tensor], frames: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Add positional information over the full time axis, then layer-norm.

        With ``mask`` given, masked rows are replaced by exact zeros first, so
        nothing computed at unmasked positions depends on masked content.
        """
        t, d = frames.shape
        x = frames
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (t,):
                raise ValueError(f"mask length {mask.shape} does not match {t} frames")
            keep_idx = np.flatnonzero(~mask)
            zeros = Tensor._wrap(np.zeros((t - keep_idx.size, d), dtype=frames.dtype))
            x = F.take(F.concat([F.take(frames, keep_idx), zeros]), _interleave_order(mask))
        if self.cfg.pos_encoding == "conv":
            left, right = _same_pad(self.cfg.pos_conv_kernel)
            pos = F.gelu(F.conv1d(x, params["pos_conv.weight"], params["pos_conv.bias"],
                                  pad_left=left, pad_right=right))
        else:
            if t > self.cfg.max_frames:
                raise ValueError(f"{t} frames exceed max_frames={self.cfg.max_frames}")
            pos = F.take(params["pos_embed"], slice(0, t))
        return F.layer_norm(x + pos, params["encoder_ln.weight"], params["encoder_ln.bias"])

    # -- Transformer ----------------------------------------------------
    def block(self, params: dict[str, Tensor], i: int, x: Tensor, rng: RngStream | None, training: bool) -> Tensor:
        """Pre-LN Transformer block on an ``(n, d)`` sequence."""
        cfg = self.cfg
        p = f"blocks.{i}."
        n, d = x.shape
        h = cfg.n_heads
        rate = cfg.dropout_rate if training else 0.0

        def drop(t: Tensor) -> Tensor:
            return dropout(t, rate, rng, training)[0]

        a = F.layer_norm(x, params[p + "ln1.weight"], params[p + "ln1.bias"])
        zero = Tensor._wrap(np.zeros(d, dtype=x.dtype))
        qkv_bias = F.concat([params[p + "attn.q.bias"], zero, params[p + "attn.v.bias"]])
        qkv = F.linear(a, params[p + "attn.qkv.weight"], qkv_bias)
        mult = F.dropout_multiplier((h, n, n), rate, rng, x.dtype)[1] if training and rate > 0 else None
        ctx = F.attention(qkv, h, mult)
        x = x + drop(F.linear(ctx, params[p + "attn.out.weight"], params[p + "attn.out.bias"]))
        f = F.layer_norm(x, params[p + "ln2.weight"], params[p + "ln2.bias"])
        f = drop(F.gelu(F.linear(f, params[p + "ffn.fc1.weight"], params[p + "ffn.fc1.bias"])))
        f = F.linear(f, params[p + "ffn.fc2.weight"], params[p + "ffn.fc2.bias"])
        return x + drop(f)

    def encode(self, params: dict[str, Tensor], x: Tensor, kept: Sequence[int],
               rng: RngStream | None, training: bool) -> tuple[Tensor, list[Tensor]]:
        hidden = []
        for i in kept:
            x = self.block(params, i, x, rng, training)
            hidden.append(x)
        return x, hidden

    # -- student / teacher passes ----------------------------------------
    def student_forward(self, params: dict[str, Tensor], frames: Tensor, mask, rng: RngStream,
                        training: bool, pass_id: int = 1, positioned: Tensor | None = None) -> SubModelPass:
        """One stochastic sub-model pass over a masked view.

        Only unmasked frames enter the encoder. ``positioned`` may carry a
        precomputed ``position(params, frames, mask)`` so that both passes of
        one view share that node.
        """
        mask = np.asarray(mask, dtype=bool)
        t = frames.shape[0]
        if mask.shape != (t,):
            raise ValueError(f"mask length {mask.size} does not match {t} frames")
        n_masked = int(mask.sum())
        if n_masked == 0 or n_masked == t:
            raise ValueError("masked view must contain at least one masked and one unmasked frame")
        cfg = self.cfg
        rng = rng.copy()
        ld_rng, dr_rng = rng.split("layerdrop"), rng.split("dropout")
        if training:
            kept = layerdrop_sample(ld_rng, cfg.layerdrop_rate, cfg.n_layers)
        else:
            kept = tuple(range(cfg.n_layers))
        if positioned is None:
            positioned = self.position(params, frames, mask)
        keep_idx = np.flatnonzero(~mask)
        mask_idx = np.flatnonzero(mask)
        rate = cfg.dropout_rate if training else 0.0
        x = dropout(F.take(positioned, keep_idx), rate, dr_rng, training)[0]
        x, hidden = self.encode(params, x, kept, dr_rng, training)
        pred = self.decode(params, x, mask, mask_idx, dr_rng, training)
        return SubModelPass(pass_id, rng, kept, pred, hidden)

    def decode(self, params: dict[str, Tensor], enc: Tensor, mask: np.ndarray, mask_idx: np.ndarray,
               rng: RngStream | None, training: bool) -> Tensor:
        cfg = self.cfg
        enc = F.layer_norm(enc, params["final_ln.weight"], params["final_ln.bias"])
        ones = Tensor._wrap(np.ones((mask_idx.size, cfg.d_model), dtype=enc.dtype))
        full = F.take(F.concat([enc, ones * params["mask_token"]]), _interleave_order(mask))
        left, right = _same_pad(cfg.decoder_kernel)
        rate = cfg.dropout_rate if training else 0.0
        for j in range(cfg.decoder_layers):
            p = f"decoder.{j}."
            r = F.conv1d(full, params[p + "conv.weight"], params[p + "conv.bias"], pad_left=left, pad_right=right)
            r = F.gelu(F.layer_norm(r, params[p + "ln.weight"], params[p + "ln.bias"]))
            full = full + dropout(r, rate, rng, training)[0]
        return F.linear(F.take(full, mask_idx), params["final_proj.weight"], params["final_proj.bias"])

    def teacher_forward(self, params: dict[str, Tensor], frames: Tensor) -> list[Tensor]:
        """Every block's output on the unmasked sample; inference mode, no graph."""
        with no_grad():
            x = self.position(params, frames.detach())
            _, hidden = self.encode(params, x, range(self.cfg.n_layers), None, False)
        return hidden

    def upstream_hidden_states(self, params: dict[str, Tensor], waveform) -> list[np.ndarray]:
        """Frozen full-model features: feature-encoder output, then every block."""
        with no_grad():
            frames = self.feature_encode(params, waveform)
            x = self.position(params, frames)
            _, hidden = self.encode(params, x, range(self.cfg.n_layers), None, False)
        return [frames.data] + [h.data for h in hidden]


def _interleave_order(mask: np.ndarray) -> np.ndarray:
    """Row order that scatters ``concat([unmasked_rows, masked_rows])`` back to time order."""
    mask = np.asarray(mask, dtype=bool)
    order = np.empty(mask.size, dtype=np.intp)
    n_keep = int((~mask).sum())
    order[~mask] = np.arange(n_keep)
    order[mask] = n_keep + np.arange(mask.size - n_keep)
    return order
