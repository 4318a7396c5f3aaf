"""Finite-difference checks for every registered op and a few composite graphs.

Each case draws small random float64 inputs from a dedicated stream and
reduces the op output to a scalar with a fixed random projection
``sum(out * R)``, so every output element carries a generic, O(1) weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import REGISTRY, RngStream, Tensor, gradcheck, precision
from .autodiff import functional as F

TOLERANCE = 1e-4

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _leaf(rng: RngStream, shape, low: float | None = None) -> Tensor:
    data = rng.normal(shape)
    if low is not None:  # strictly positive domain (sqrt, log)
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def _dim(rng: RngStream, lo: int = 2, hi: int = 5) -> int:
    return int(rng.integers(lo, hi + 1))


def _project(out: Tensor, rng: RngStream) -> Callable[[Tensor], Tensor]:
    r = Tensor._wrap(rng.normal(out.shape))
    return lambda y: F.sum(y * r)


def _unary(op: Callable[[Tensor], Tensor], low: float | None = None):
    def build(rng: RngStream) -> Case:
        x = _leaf(rng, (_dim(rng), _dim(rng)), low)
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor]):
    def build(rng: RngStream) -> Case:
        shape = (_dim(rng), _dim(rng))
        # alternate full-shape and trailing-broadcast second operands
        b_shape = shape if rng.uniform() < 0.5 else shape[1:]
        a, b = _leaf(rng, shape), _leaf(rng, b_shape)
        proj = _project(op(a, b), rng)
        return (lambda: proj(op(a, b))), [a, b]
    return build


def _case_matmul(rng: RngStream) -> Case:
    n, k, m = _dim(rng), _dim(rng), _dim(rng)
    batched = rng.uniform() < 0.5
    a = _leaf(rng, (_dim(rng), n, k) if batched else (n, k))
    b = _leaf(rng, (k, m))
    proj = _project(F.matmul(a, b), rng)
    return (lambda: proj(F.matmul(a, b))), [a, b]


def _case_transpose(rng: RngStream) -> Case:
    x = _leaf(rng, (_dim(rng), _dim(rng), _dim(rng)))
    axes = tuple(int(i) for i in rng.permutation(3))
    proj = _project(F.transpose(x, axes), rng)
    return (lambda: proj(F.transpose(x, axes))), [x]


def _case_reshape(rng: RngStream) -> Case:
    a, b = _dim(rng), _dim(rng)
    x = _leaf(rng, (a, b * 2))
    proj = _project(F.reshape(x, (2 * a, b)), rng)
    return (lambda: proj(F.reshape(x, (2 * a, b)))), [x]


def _case_concat(rng: RngStream) -> Case:
    axis = int(rng.integers(0, 2))
    base = [_dim(rng), _dim(rng)]
    xs = []
    for _ in range(3):
        shape = list(base)
        shape[axis] = _dim(rng, 1, 3)
        xs.append(_leaf(rng, tuple(shape)))
    proj = _project(F.concat(xs, axis), rng)
    return (lambda: proj(F.concat(xs, axis))), xs


def _case_slice(rng: RngStream) -> Case:
    n = _dim(rng, 3, 6)
    x = _leaf(rng, (n, _dim(rng)))
    # includes repeated rows so gradient scatter-add is exercised
    idx = rng.integers(0, n, n + 2)
    proj = _project(F.take(x, idx), rng)
    return (lambda: proj(F.take(x, idx))), [x]


def _case_reduce(fn):
    def build(rng: RngStream) -> Case:
        x = _leaf(rng, (_dim(rng), _dim(rng)))
        axis = [None, 0, 1, -1][int(rng.integers(0, 4))]
        proj = _project(fn(x, axis), rng)
        return (lambda: proj(fn(x, axis))), [x]
    return build


def _case_softmax(fn):
    def build(rng: RngStream) -> Case:
        x = _leaf(rng, (_dim(rng), _dim(rng)))
        axis = int(rng.integers(0, 2))
        proj = _project(fn(x, axis), rng)
        return (lambda: proj(fn(x, axis))), [x]
    return build


def _case_layer_norm(rng: RngStream) -> Case:
    n, d = _dim(rng), _dim(rng, 3, 6)
    x, w, b = _leaf(rng, (n, d)), _leaf(rng, (d,)), _leaf(rng, (d,))
    proj = _project(F.layer_norm(x, w, b), rng)
    return (lambda: proj(F.layer_norm(x, w, b))), [x, w, b]


def _case_conv1d(rng: RngStream) -> Case:
    k, s = _dim(rng, 1, 4), _dim(rng, 1, 3)
    s = min(s, k)
    length = _dim(rng, 6, 10)
    cin, cout = _dim(rng, 1, 3), _dim(rng, 1, 3)
    pl, pr = int(rng.integers(0, k)), int(rng.integers(0, k))
    x, w = _leaf(rng, (length, cin)), _leaf(rng, (k, cin, cout))

    def f(x=x, w=w):
        return F.conv1d(x, w, stride=s, pad_left=pl, pad_right=pr)
    proj = _project(f(), rng)
    return (lambda: proj(f())), [x, w]


def _case_linear(rng: RngStream) -> Case:
    n, k, m = _dim(rng), _dim(rng), _dim(rng)
    x, w, b = _leaf(rng, (n, k)), _leaf(rng, (k, m)), _leaf(rng, (m,))
    proj = _project(F.linear(x, w, b), rng)
    return (lambda: proj(F.linear(x, w, b))), [x, w, b]


def _case_attention(rng: RngStream) -> Case:
    h, dh, n = _dim(rng, 1, 3), _dim(rng, 1, 3), _dim(rng, 2, 5)
    qkv = _leaf(rng, (n, 3 * h * dh))
    drop = None
    if rng.uniform() < 0.5:
        drop = F.dropout_multiplier((h, n, n), 0.2, rng.split("drop"), np.float64)[1]
    proj = _project(F.attention(qkv, h, drop), rng)
    return (lambda: proj(F.attention(qkv, h, drop))), [qkv]


OP_CASES: dict[str, Callable[[RngStream], Case]] = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "slice": _case_slice,
    "sum": _case_reduce(lambda x, axis: F.sum(x, axis)),
    "mean": _case_reduce(lambda x, axis: F.mean(x, axis)),
    "square": _unary(F.square),
    "sqrt": _unary(F.sqrt, low=0.5),
    "exp": _unary(F.exp),
    "log": _unary(F.log, low=0.5),
    "softmax": _case_softmax(lambda x, axis: F.softmax(x, axis)),
    "log_softmax": _case_softmax(lambda x, axis: F.log_softmax(x, axis)),
    "gelu": _unary(F.gelu),
    "layer_norm": _case_layer_norm,
    "conv1d": _case_conv1d,
    "linear": _case_linear,
    "attention": _case_attention,
}


# -- composite graphs -------------------------------------------------------

def _linear_mean(rng: RngStream) -> Case:
    x = Tensor(rng.normal((6, 5)))
    w, b = _leaf(rng, (5, 3)), _leaf(rng, (3,))
    return (lambda: F.mean(F.linear(x, w, b))), [w, b]


def _tiny_model_config(n_layers: int):
    from .model import ModelConfig
    return ModelConfig(n_layers=n_layers, d_model=4, n_heads=2, ffn_mult=2, dropout_rate=0.1,
                       layerdrop_rate=0.1, decoder_layers=1, decoder_kernel=3,
                       feature_encoder_spec=[[3, 4, 2], [4, 4, 2]], pos_conv_kernel=3)


def _float64_params(cfg, seed: int) -> dict[str, Tensor]:
    from .model import init_params
    return {k: Tensor(p.data, requires_grad=True, dtype=np.float64, name=k)
            for k, p in init_params(cfg, seed).items()}


def _transformer_block(rng: RngStream) -> Case:
    from .model import Model
    cfg = _tiny_model_config(1)
    model = Model(cfg)
    params = _float64_params(cfg, int(rng.integers(0, 1 << 30)))
    prefix = "blocks.0."
    leaves = [p for k, p in params.items() if k.startswith(prefix)]
    x = _leaf(rng, (5, cfg.d_model))
    stream = rng.split("dropout")
    proj = _project(model.block(params, 0, x, stream.copy(), True), rng)
    return (lambda: proj(model.block(params, 0, x, stream.copy(), True))), [x] + leaves


def _l_total_two_layer(rng: RngStream) -> Case:
    """Full dual-pass objective on a 2-layer model; the teacher target is fixed."""
    from .model import Model
    from .objective import mcr_objective
    from .teacher import build_target
    cfg = _tiny_model_config(2)
    model = Model(cfg)
    params = _float64_params(cfg, int(rng.integers(0, 1 << 30)))
    wav = rng.normal(10 * cfg.total_stride)
    frames = model.feature_encode(params, wav)
    y_full = build_target(model.teacher_forward(params, frames), 2).y
    mask = np.zeros(frames.shape[0], dtype=bool)
    mask[2:6] = True
    y = np.asarray(y_full)[mask]
    s1, s2 = rng.split("pass", 1), rng.split("pass", 2)

    def loss() -> Tensor:
        fr = model.feature_encode(params, wav)
        f1 = model.student_forward(params, fr, mask, s1, True, 1).prediction
        f2 = model.student_forward(params, fr, mask, s2, True, 2).prediction
        return mcr_objective(y, f1, f2, lam=1.0).L_total
    return loss, list(params.values())


COMPOSITE_CASES: dict[str, Callable[[RngStream], Case]] = {
    "linear+mean": _linear_mean,
    "transformer_block": _transformer_block,
    "L_total(2-layer)": _l_total_two_layer,
}


@dataclass
class CheckResult:
    name: str
    max_error: float
    trials: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error < self.tolerance


def check_case(name: str, build: Callable[[RngStream], Case], trials: int, seed: int = 0,
               tolerance: float = TOLERANCE) -> CheckResult:
    worst = 0.0
    with precision(np.float64):
        for t in range(trials):
            fn, inputs = build(RngStream(seed).split("gradcheck", name, t))
            try:
                err = gradcheck(fn, inputs)
            except (FloatingPointError, ValueError, ArithmeticError):
                err = float("inf")
            worst = max(worst, err) if math.isfinite(err) else float("inf")
    return CheckResult(name, worst, trials, tolerance)


def run_suite(trials: int = 10, composite_trials: int = 1, seed: int = 0,
              ops: list[str] | None = None) -> list[CheckResult]:
    """Check every registered op (``trials`` each) plus the composite graphs."""
    missing = sorted(set(REGISTRY) - set(OP_CASES))
    if missing:
        raise KeyError(f"no gradcheck case for registered ops: {missing}")
    names = sorted(REGISTRY) if ops is None else ops
    results = [check_case(n, OP_CASES[n], trials, seed) for n in names]
    if ops is None:
        results += [check_case(n, b, composite_trials, seed) for n, b in COMPOSITE_CASES.items()]
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'trials':>6}  {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.trials:>6}  {r.max_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def failing(results: list[CheckResult]) -> list[str]:
    return [r.name for r in results if not r.passed]


__all__ = [
    "COMPOSITE_CASES", "OP_CASES", "TOLERANCE", "CheckResult", "check_case", "failing",
    "format_table", "run_suite",
]
