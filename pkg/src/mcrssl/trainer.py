"""Pre-training loop: teacher targets, dual student passes, update, EMA."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint as ckpt
from .autodiff import RngStream, Tensor, allocation_count
from .autodiff import functional as F
from .config import Config, config_from_dict
from .data import Corpus, load_corpus
from .masking import sample_masks
from .model import Model, init_params
from .objective import mcr_objective, pred1_loss
from .optim import clip_grad_norm, lr_at, make_optimizer
from .teacher import TeacherState, build_target, ema_update, tau_at

METRIC_FIELDS = ("step", "L_pred1", "L_pred2", "L_mcr", "L_total", "τ", "lr", "wall_ms")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, views: list[tuple[int, int]]):
        super().__init__(f"non-finite loss at step {step} in (sample, view) {views}")
        self.step = step
        self.views = views


@dataclass
class MetricsRecord:
    step: int
    L_pred1: float
    L_pred2: float | None
    L_mcr: float | None
    L_total: float
    tau: float
    lr: float
    wall_ms: float | None = None

    def to_json(self) -> str:
        row = {
            "step": self.step,
            "L_pred1": self.L_pred1,
            "L_pred2": self.L_pred2,
            "L_mcr": self.L_mcr,
            "L_total": self.L_total,
            "τ": self.tau,
            "lr": self.lr,
            "wall_ms": self.wall_ms,
        }
        return json.dumps(row, ensure_ascii=False)

    @classmethod
    def from_dict(cls, row: dict) -> "MetricsRecord":
        missing = [k for k in METRIC_FIELDS if k not in row]
        if missing:
            raise KeyError(f"metrics record missing {missing}")
        return cls(row["step"], row["L_pred1"], row["L_pred2"], row["L_mcr"], row["L_total"],
                   row["τ"], row["lr"], row["wall_ms"])


def _mean(values: list[float]) -> float:
    # plain left-to-right sum: the per-view accumulation order is part of the contract
    return sum(values) / len(values)


class Trainer:
    """Owns student, teacher and optimizer state for one pre-training run."""

    def __init__(self, cfg: Config, corpus: Corpus | None = None):
        self.cfg = cfg.validate()
        self.model = Model(cfg.model)
        self.corpus = corpus if corpus is not None else load_corpus(cfg.data)
        self.student = init_params(cfg.model, cfg.train.seed)
        self.teacher = TeacherState.from_student(self.student, cfg.model, cfg.teacher.ema_track_feature_encoder)
        t = cfg.train
        self.optimizer = make_optimizer(t.optimizer, self.student, (t.adam_beta1, t.adam_beta2), t.adam_eps)
        self.root = RngStream(t.seed)
        self.step = 0
        self.last_allocations = 0

    # -- rng tree ---------------------------------------------------------
    def batch_ids(self, step: int) -> list[int]:
        n = len(self.corpus)
        b = min(self.cfg.train.batch_size, n)
        perm = self.root.split("batch", step).permutation(n)
        return [int(i) for i in perm[:b]]

    def mask_stream(self, step: int, sample: int) -> RngStream:
        return self.root.split("mask", step, sample)

    def pass_stream(self, step: int, sample: int, view: int, pass_id: int) -> RngStream:
        if pass_id == 2 and self.cfg.train.alias_pass2_rng:
            pass_id = 1
        return self.root.split("pass", step, sample, view, pass_id)

    # -- one update ---------------------------------------------------------
    def compute_gradients(self, ids: Iterable[int] | None = None):
        """Forward/backward for the batch of ``self.step``.

        Each view is backpropagated on its own into zeroed leaf gradients and
        the per-view gradients are summed in a fixed (sample, view) order.
        Returns ``(grads, per-view loss values)``.
        """
        cfg = self.cfg
        step = self.step
        ids = self.batch_ids(step) if ids is None else list(ids)
        mcr = cfg.train.mode == "mcr"
        obj = cfg.objective
        n_views = len(ids) * cfg.masking.num_views
        scale = 1.0 / n_views
        grads: dict[str, np.ndarray] = {}
        rows: list[dict] = []
        bad: list[tuple[int, int]] = []
        k = cfg.teacher.top_k(cfg.model.n_layers)
        for n in ids:
            wav = self.corpus[n].waveform
            fe_out = self.model.feature_encode(self.student, wav)
            if cfg.teacher.ema_track_feature_encoder:
                t_frames = self.model.feature_encode(self.teacher.params, wav).detach()
            else:
                t_frames = fe_out
            y = build_target(self.model.teacher_forward(self.teacher.params, t_frames), k,
                             cfg.teacher.target_norm).y
            # views backprop into this leaf; the feature encoder is then traversed once per sample
            frames = Tensor(fe_out.data, requires_grad=True)
            views = sample_masks(frames.shape[0], cfg.masking, self.mask_stream(step, n), sample_id=n)
            for view in views:
                positioned = self.model.position(self.student, frames, view.mask)
                f1 = self.model.student_forward(self.student, frames, view.mask,
                                                self.pass_stream(step, n, view.view_id, 1),
                                                True, 1, positioned).prediction
                y_m = y[view.mask]
                if mcr:
                    f2 = self.model.student_forward(self.student, frames, view.mask,
                                                    self.pass_stream(step, n, view.view_id, 2),
                                                    True, 2, positioned).prediction
                    b = mcr_objective(y_m, f1, f2, obj.lambda_mcr, obj.reduction, obj.mcr_stopgrad)
                    loss = b.L_total
                    row = {"L_pred1": b.L_pred1.item(), "L_pred2": b.L_pred2.item(),
                           "L_mcr": b.L_mcr.item(), "L_total": loss.item()}
                else:
                    loss = pred1_loss(y_m, f1, obj.reduction)
                    row = {"L_pred1": loss.item(), "L_pred2": None, "L_mcr": None, "L_total": loss.item()}
                row["sample"], row["view"] = n, view.view_id
                rows.append(row)
                if not math.isfinite(row["L_total"]):
                    bad.append((n, view.view_id))
                    continue
                (loss * scale).backward()
                _collect(self.student, grads)
            if frames.grad is not None and fe_out.requires_grad:
                F.sum(fe_out * Tensor._wrap(frames.grad)).backward()
                _collect(self.student, grads)
        if bad:
            raise NonFiniteLossError(step, bad)
        return grads, rows

    def train_step(self) -> MetricsRecord:
        t0 = time.perf_counter()
        a0 = allocation_count()
        cfg = self.cfg
        grads, rows = self.compute_gradients()
        if cfg.train.grad_clip > 0:
            clip_grad_norm(grads, cfg.train.grad_clip)
        lr = lr_at(self.step, cfg.train.lr, cfg.train.warmup_updates, cfg.train.total_updates,
                   cfg.train.lr_schedule)
        self.optimizer.step(grads, lr)
        tau = tau_at(self.step, cfg.teacher.schedule)
        ema_update(self.teacher, self.student, tau)
        self.step += 1
        self.last_allocations = allocation_count() - a0
        mcr = cfg.train.mode == "mcr"
        rec = MetricsRecord(
            step=self.step,
            L_pred1=_mean([r["L_pred1"] for r in rows]),
            L_pred2=_mean([r["L_pred2"] for r in rows]) if mcr else None,
            L_mcr=_mean([r["L_mcr"] for r in rows]) if mcr else None,
            L_total=_mean([r["L_total"] for r in rows]),
            tau=tau,
            lr=lr,
            wall_ms=(time.perf_counter() - t0) * 1e3 if cfg.train.record_wall_time else None,
        )
        return rec

    def run(self, until: int | None = None, metrics_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None, run_id: str | None = None) -> list[MetricsRecord]:
        """Train up to ``until`` (default ``total_updates``) global steps."""
        until = self.cfg.train.total_updates if until is None else until
        records = []
        writer = MetricsWriter(metrics_path, self.cfg, run_id, resume_step=self.step) if metrics_path else None
        try:
            while self.step < until:
                rec = self.train_step()
                records.append(rec)
                if writer and rec.step % self.cfg.train.log_every == 0:
                    writer.write(rec)
                every = self.cfg.train.save_every
                if checkpoint_dir and every > 0 and self.step % every == 0:
                    self.save(Path(checkpoint_dir) / f"step{self.step:07d}.ckpt")
        finally:
            if writer:
                writer.close()
        return records

    # -- persistence --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {
            "meta.global_step": np.array([self.step], dtype=np.uint64),
            "rng.root": np.array(self.root.state(), dtype=np.uint64),
        }
        arrays.update({f"student.{k}": p.data for k, p in self.student.items()})
        arrays.update({f"teacher.{k}": p.data for k, p in self.teacher.tracked.items()})
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def save(self, path: str | Path) -> None:
        ckpt.save(path, self.cfg.to_dict(), self.state_arrays())

    @classmethod
    def from_checkpoint(cls, path: str | Path, corpus: Corpus | None = None,
                        cfg: Config | None = None) -> "Trainer":
        stored_cfg, arrays = ckpt.load(path)
        cfg = cfg if cfg is not None else config_from_dict(stored_cfg)
        tr = cls(cfg, corpus)
        tr.load_state_arrays(arrays)
        return tr

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        ckpt.check_names(expected, arrays, "checkpoint arrays")
        for k, p in self.student.items():
            _copy_checked(p.data, arrays[f"student.{k}"], k)
        for k, p in self.teacher.tracked.items():
            _copy_checked(p.data, arrays[f"teacher.{k}"], k)
        self.optimizer.load_state_arrays(arrays)
        self.step = int(arrays["meta.global_step"][0])
        seed, stream_id, counter = (int(v) for v in arrays["rng.root"])
        self.root = RngStream(seed, stream_id, counter)


def _collect(params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """Move leaf gradients into the running sum and reset them."""
    for name, p in params.items():
        if p.grad is None:
            continue
        if name in grads:
            grads[name] += p.grad
        else:
            grads[name] = p.grad
        p.grad = None


def _copy_checked(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape:
        raise ckpt.CheckpointNameError(f"{name}: stored shape {src.shape} != model shape {dst.shape}")
    np.copyto(dst, src)


class MetricsWriter:
    """JSON-lines metrics: a config header line, then one record per logged step.

    When resuming into an existing file, records past ``resume_step`` are
    dropped first so the file ends up identical to an uninterrupted run.
    """

    def __init__(self, path: str | Path, cfg: Config, run_id: str | None, resume_step: int = 0):
        self.path = Path(path)
        header = json.dumps({"config": cfg.to_dict(), "run_id": run_id or self.path.stem},
                            sort_keys=True, ensure_ascii=False)
        kept = [header]
        if resume_step > 0 and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines()[1:]:
                if line.strip() and json.loads(line)["step"] <= resume_step:
                    kept.append(line)
        self.fh = open(self.path, "w", encoding="utf-8")
        self.fh.write("\n".join(kept) + "\n")
        self.fh.flush()

    def write(self, rec: MetricsRecord) -> None:
        self.fh.write(rec.to_json() + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path: str | Path) -> tuple[dict, list[MetricsRecord]]:
    """Parse a metrics file into ``(header, records)``; raises ``ValueError`` with a line number."""
    header: dict = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if "config" in row and "step" not in row:
                    header = row
                    continue
                if row.get("kind") == "probe":
                    continue
                records.append(MetricsRecord.from_dict(row))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed metrics line ({e})") from None
    return header, records
