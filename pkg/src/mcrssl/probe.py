"""Frozen-upstream probing with learned softmax layer weights.

The pre-trained network is run once in inference mode (no dropout, every
block executed) to collect the hidden state of each layer. Only a vector of
layer logits and a single linear head are trained on top. The learned
mixing weights are the layer-weight analysis exported for comparison
between runs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import RngStream, Tensor, precision
from .autodiff import functional as F
from .config import Config, ProbeConfig, config_from_dict
from .data import Corpus, SyntheticSpec, synthetic_corpus
from .model import Model, init_params
from .optim import Adam

# task name -> (kind, number of classes or None for "from the corpus")
TASKS = {
    "tone_class": ("utterance", None),
    "voicing": ("frame", 2),
    "projection": ("frame", 2),
    "random": ("frame", 2),
}


@dataclass
class LayerWeights:
    logits: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        z = np.asarray(self.logits, dtype=np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    def validate(self, tol: float = 1e-6) -> "LayerWeights":
        w = self.weights
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > tol:
            raise ValueError(f"layer weights must be nonnegative and sum to 1, got {w.tolist()}")
        return self


def weighted_sum(hidden_states, weights) -> Tensor:
    """``sum_i w_i * h_i`` over same-shaped hidden states.

    ``weights`` may be a :class:`LayerWeights`, an array, or a graph Tensor
    (so gradients reach the logits during probe training).
    """
    hs = [h.data if isinstance(h, Tensor) else np.asarray(h) for h in hidden_states]
    if isinstance(weights, LayerWeights):
        weights = weights.weights
    w = weights if isinstance(weights, Tensor) else Tensor._wrap(np.asarray(weights, dtype=hs[0].dtype))
    if w.ndim != 1 or w.shape[0] != len(hs):
        raise ValueError(f"got {len(hs)} hidden states but {w.shape} weights")
    shape = hs[0].shape
    if any(h.shape != shape for h in hs):
        raise ValueError("hidden states must all have the same shape")
    stacked = Tensor._wrap(np.stack(hs, axis=-1).reshape(-1, len(hs)).astype(w.dtype, copy=False))
    out = F.matmul(stacked, F.reshape(w, (len(hs), 1)))
    return F.reshape(out, shape)


@dataclass
class Upstream:
    model: Model
    params: dict[str, Tensor]
    config: Config


def load_upstream(path: str | Path, which: str = "student") -> Upstream:
    """Rebuild a frozen network from a checkpoint (``which``: student or teacher)."""
    stored, arrays = ckpt.load(path)
    cfg = config_from_dict(stored)
    params = init_params(cfg.model, 0)
    expected = {f"student.{k}" for k in params}
    missing = sorted(expected - set(arrays))
    if missing:
        raise ckpt.CheckpointNameError(f"checkpoint lacks upstream parameters: {missing}")
    for k, p in params.items():
        src = arrays.get(f"teacher.{k}") if which == "teacher" else None
        src = arrays[f"student.{k}"] if src is None else src
        if src.shape != p.shape:
            raise ckpt.CheckpointNameError(f"{k}: stored shape {src.shape} != model shape {p.shape}")
        p.data = np.array(src, dtype=p.dtype)
        p.requires_grad = False
    return Upstream(Model(cfg.model), params, cfg)


def upstream_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def probe_corpus(cfg: Config) -> Corpus:
    """Held-apart synthetic clips for probing, seeded by ``probe.seed``."""
    spec: SyntheticSpec = dataclasses.replace(cfg.data.synthetic, n_clips=cfg.probe.n_clips,
                                              seed=cfg.probe.seed)
    return synthetic_corpus(spec)


def extract_features(up: Upstream, corpus: Corpus, include_feature_layer: bool = True) -> list[np.ndarray]:
    """Per clip, an array ``(n_layers [+1], T, d)`` of frozen hidden states."""
    feats = []
    for clip in corpus.clips:
        hs = up.model.upstream_hidden_states(up.params, clip.waveform)
        if not include_feature_layer:
            hs = hs[1:]
        feats.append(np.stack(hs).astype(np.float64))
    return feats


def task_labels(task: str, corpus: Corpus, feats: list[np.ndarray], stride: int, seed: int) -> list[np.ndarray]:
    """Labels per clip: shape ``()`` for utterance tasks, ``(T,)`` for frame tasks.

    ``projection`` thresholds a fixed random projection of the layer-0 hidden
    state at its corpus median, so a linear probe can recover it by
    construction. It needs the feature-encoder layer in ``feats``.
    """
    if task not in TASKS:
        raise ValueError(f"unknown probe task {task!r}; choose from {sorted(TASKS)}")
    if task == "tone_class":
        return [np.array(c.label) for c in corpus.clips]
    if task == "voicing":
        out = []
        for clip, f in zip(corpus.clips, feats):
            t = f.shape[1]
            v = clip.voiced[: t * stride].reshape(t, stride)
            out.append((v.mean(axis=1) >= 0.5).astype(np.int64))
        return out
    if task == "projection":
        u = RngStream(seed).split("probe", "direction").normal(feats[0].shape[-1])
        score = [f[0] @ u for f in feats]
        threshold = np.median(np.concatenate(score))
        return [(z > threshold).astype(np.int64) for z in score]
    rng = RngStream(seed).split("probe", "random-labels")
    return [rng.integers(0, 2, f.shape[1]) for f in feats]


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    chance: float
    weights: LayerWeights
    final_loss: float
    n_train: int
    n_test: int

    def record(self) -> dict:
        return {
            "kind": "probe",
            "task": self.task,
            "accuracy": self.accuracy,
            "chance": self.chance,
            "weights": self.weights.weights.tolist(),
            "final_loss": self.final_loss,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


def _design(feats: list[np.ndarray], labels: list[np.ndarray], idx, utterance: bool):
    if utterance:
        x = np.stack([feats[i].mean(axis=1) for i in idx])  # (N, L, d)
        y = np.array([int(labels[i]) for i in idx])
    else:
        x = np.concatenate([feats[i].transpose(1, 0, 2) for i in idx])  # (N*T, L, d)
        y = np.concatenate([labels[i] for i in idx])
    return x, y


def _forward(x: np.ndarray, logits: Tensor, w: Tensor, b: Tensor) -> Tensor:
    n, n_layers, d = x.shape
    mix = F.softmax(logits, axis=0)
    stacked = Tensor._wrap(np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(n * d, n_layers))
    pooled = F.reshape(F.matmul(stacked, F.reshape(mix, (n_layers, 1))), (n, d))
    return F.linear(pooled, w, b)


def probe_train(upstream: Upstream | str | Path, task: str, epochs: int | None = None,
                probe_cfg: ProbeConfig | None = None, corpus: Corpus | None = None) -> ProbeResult:
    """Fit layer logits and a linear head on frozen features; report held-out accuracy."""
    up = upstream if isinstance(upstream, Upstream) else load_upstream(upstream)
    pc = probe_cfg if probe_cfg is not None else up.config.probe
    epochs = pc.epochs if epochs is None else epochs
    corpus = corpus if corpus is not None else probe_corpus(dataclasses.replace(up.config, probe=pc))
    if len(corpus) < 2:
        raise ValueError("probe dataset needs at least two clips")
    if task == "projection" and not pc.include_feature_layer:
        raise ValueError("the projection task is defined on the feature-encoder layer; enable include_feature_layer")

    feats = extract_features(up, corpus, pc.include_feature_layer)
    labels = task_labels(task, corpus, feats, up.model.cfg.total_stride, pc.seed)
    kind, n_classes = TASKS[task]
    utterance = kind == "utterance"
    if n_classes is None:
        n_classes = int(max(int(l) for l in labels)) + 1

    order = RngStream(pc.seed).split("probe", "split").permutation(len(corpus))
    n_test = max(1, int(round(pc.holdout_frac * len(corpus))))
    if n_test >= len(corpus):
        raise ValueError("holdout_frac leaves no training clips")
    test_idx, train_idx = order[:n_test], order[n_test:]
    x_tr, y_tr = _design(feats, labels, train_idx, utterance)
    x_te, y_te = _design(feats, labels, test_idx, utterance)

    n_layers, d = x_tr.shape[1], x_tr.shape[2]
    with precision(np.float64):
        init = RngStream(pc.seed).split("probe", "head")
        params = {
            "logits": Tensor(np.zeros(n_layers), requires_grad=True),
            "head.weight": Tensor(init.normal((d, n_classes)) / math.sqrt(d), requires_grad=True),
            "head.bias": Tensor(np.zeros(n_classes), requires_grad=True),
        }
        opt = Adam(params, betas=(0.9, 0.999), eps=1e-8)
        onehot = Tensor._wrap(np.eye(n_classes)[y_tr])
        loss_value = float("nan")
        for _ in range(epochs):
            for p in params.values():
                p.grad = None
            out = _forward(x_tr, params["logits"], params["head.weight"], params["head.bias"])
            loss = -F.sum(F.log_softmax(out, axis=-1) * onehot) * (1.0 / len(y_tr))
            loss.backward()
            loss_value = loss.item()
            opt.step({k: p.grad for k, p in params.items()}, pc.lr)
        pred = _forward(x_te, params["logits"], params["head.weight"], params["head.bias"]).data.argmax(axis=1)

    accuracy = float(np.mean(pred == y_te))
    chance = float(np.bincount(y_te, minlength=n_classes).max() / len(y_te))
    weights = LayerWeights(params["logits"].data.copy()).validate()
    return ProbeResult(task, accuracy, chance, weights, loss_value, len(y_tr), len(y_te))


def weight_entropy(weights) -> float:
    """Shannon entropy (nats) of a layer-weight distribution."""
    w = weights.weights if isinstance(weights, LayerWeights) else np.asarray(weights, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def _as_list(weights) -> list[float]:
    w = weights.weights if isinstance(weights, LayerWeights) else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-6:
        raise ValueError(f"layer weights must be nonnegative and sum to 1, got {w.tolist()}")
    return [float(v) for v in w]


def export_weight_analysis(weights_per_task: dict, path: str | Path) -> dict[str, list[float]]:
    """Write ``{task: [w_0, ..., w_L]}`` as JSON; every row must sum to 1."""
    doc = {task: _as_list(w) for task, w in weights_per_task.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def export_weight_comparison(runs: dict[str, dict], path: str | Path) -> dict:
    """Side-by-side weights of several runs with the entropy of each distribution.

    Higher entropy means the weights are spread more evenly over layers.
    """
    doc = {
        run: {task: {"weights": _as_list(w), "entropy": weight_entropy(np.array(_as_list(w)))}
              for task, w in tasks.items()}
        for run, tasks in runs.items()
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def load_weight_analysis(path: str | Path) -> dict[str, list[float]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for task, w in doc.items():
        _as_list(w)
    return doc


def append_probe_metrics(path: str | Path, result: ProbeResult) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(result.record(), sort_keys=True) + "\n")
