"""Training loop with teacher-head self-distillation and head resets.

A pool of K frozen head snapshots acts as self-distillation teachers for the
student head. Every ``T_update`` epochs the teacher with the lowest
last-epoch training accuracy is replaced by the student if the student is at
least as accurate; every ``T_reset`` epochs the student head is re-initialized,
either randomly or to the elementwise mean of the teachers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .data import iterate_epoch
from .model import apply_head, load_head, make_snapshot, snapshot_head
from .optim import lr_at
from .tensor_core import Tensor

RESET_MODES = ("random", "mean", "none")
WEIGHT_MODES = ("mean_over_K", "sum")


class ProtocolError(RuntimeError):
    pass


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step, name):
        super().__init__(f"non-finite {name} at step {step}")
        self.step = step
        self.name = name


@dataclass(frozen=True)
class DflConfig:
    """Teacher count, cycles (in epochs, 0 = never) and reset / weighting modes."""

    K: int = 4
    T_update: int = 100
    T_reset: int = 100
    reset_mode: str = "mean"
    distill_weight_mode: str = "mean_over_K"
    head_len: int = 3

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.T_update < 0 or self.T_reset < 0:
            raise ValueError("cycles must be >= 0")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if self.distill_weight_mode not in WEIGHT_MODES:
            raise ValueError(f"distill_weight_mode must be one of {WEIGHT_MODES}")
        if self.reset_mode == "mean" and self.K == 0:
            raise ValueError("mean reset needs at least one teacher")
        if self.reset_mode != "none" and self.T_reset < 1:
            raise ValueError("a reset mode needs T_reset >= 1")
        if self.head_len < 1:
            raise ValueError("head_len must be >= 1")

    @classmethod
    def cycle(cls, K=4, T=100, reset_mode="mean", head_len=3, distill_weight_mode="mean_over_K"):
        """Shared update/reset cycle, the image-classification setting."""
        return cls(K, T, T, reset_mode, distill_weight_mode, head_len)

    @property
    def distill_weight(self):
        if self.K == 0:
            return 0.0
        return 1.0 / self.K if self.distill_weight_mode == "mean_over_K" else 1.0


@dataclass
class HeadStats:
    correct: int = 0
    seen: int = 0
    last_epoch_accuracy: float = 0.0
    last_epoch_seen: int = 0


@dataclass
class TeacherPool:
    teachers: list
    stats: list  # K+1 HeadStats, index 0 is the student

    @property
    def K(self):
        return len(self.teachers)

    @property
    def p(self):
        return [s.last_epoch_accuracy for s in self.stats]

    def end_epoch(self):
        for s in self.stats:
            s.last_epoch_accuracy = s.correct / s.seen if s.seen else 0.0
            s.last_epoch_seen = s.seen
            s.correct = s.seen = 0

    def reinit_meaningfulness(self):
        self.stats = [HeadStats() for _ in self.stats]


@dataclass(frozen=True)
class ReplacementReport:
    index: int  # k' in 1..K; 0 when the pool is empty
    p: tuple
    replaced: bool


@dataclass
class Forward:
    logits: list
    probs: list


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss_main: float
    train_loss_distill: float
    train_acc: list
    test_acc: float
    events: list = field(default_factory=list)


def init_pool(model, cfg, rng):
    """K independently initialized teacher heads and zeroed meaningfulness."""
    manifest = model.head_manifest()
    teachers = [make_snapshot(model.fresh_head(rng), manifest) for _ in range(cfg.K)]
    return TeacherPool(teachers, [HeadStats() for _ in range(cfg.K + 1)])


def forward_all(model, pool, batch_x):
    x = batch_x if isinstance(batch_x, Tensor) else Tensor(batch_x)
    body = model.body_forward(x)
    logits = [apply_head(model, body)]
    logits += [apply_head(model, body, t) for t in pool.teachers]
    return Forward(logits, [tc.softmax(q) for q in logits])


def compute_total_loss(probs_0, logits_0, teacher_probs, labels, cfg, return_parts=False):
    """Cross-entropy of the student plus the weighted sum of KL(student || teacher_k)."""
    main = tc.cross_entropy(logits_0, labels)
    if not teacher_probs:
        return (main, main, None) if return_parts else main
    distill = None
    for q in teacher_probs:
        kl = tc.kl_divergence(probs_0, q.detach())
        distill = kl if distill is None else tc.add(distill, kl)
    distill = tc.mul(distill, cfg.distill_weight)
    total = tc.add(main, distill)
    return (total, main, distill) if return_parts else total


def update_meaningfulness(pool, probs, labels):
    labels = np.asarray(labels)
    for s, pr in zip(pool.stats, probs):
        data = pr.data if isinstance(pr, Tensor) else np.asarray(pr)
        s.correct += int((data.argmax(axis=1) == labels).sum())
        s.seen += len(labels)


def maybe_update_teachers(pool, model):
    """Replace the weakest teacher (lowest index on ties) when p_0 >= its accuracy."""
    if any(s.last_epoch_seen == 0 for s in pool.stats):
        raise ProtocolError("teacher update without a completed epoch of meaningfulness")
    p = tuple(pool.p)
    if pool.K == 0:
        pool.reinit_meaningfulness()
        return ReplacementReport(0, p, False)
    k = int(np.argmin(p[1:])) + 1
    replaced = p[k] <= p[0]
    if replaced:
        pool.teachers[k - 1] = snapshot_head(model)
    pool.reinit_meaningfulness()
    return ReplacementReport(k, p, replaced)


def reset_student(model, pool, cfg, rng, optimizer=None):
    if cfg.reset_mode == "none":
        return
    if cfg.reset_mode == "mean":
        if pool.K == 0:
            raise ValueError("mean reset with an empty teacher pool")
        acc = [np.array(a, copy=True) for a in pool.teachers[0].params]
        for t in pool.teachers[1:]:
            for a, b in zip(acc, t.params):
                a += b
        values = [a / pool.K for a in acc]
    else:
        values = model.fresh_head(rng)
    load_head(model, make_snapshot(values, model.head_manifest()), optimizer)


def evaluate(model, ds, plan):
    """Student top-1 accuracy on ``ds`` (no augmentation, fixed order)."""
    correct = 0
    with tc.no_grad():
        for x, y in iterate_epoch(ds, plan, 0, shuffle=False):
            logits = model.forward(Tensor(x))
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(ds)


def _finite(t):
    return t is None or bool(np.isfinite(t.data).all())


def train(model, pool, dataset, optimizer, cfg, seed, *, epochs, plan, schedule, test=None, on_epoch=None,
          event_log=None):
    """Run ``epochs`` epochs of DFL training; returns one MetricsRecord per epoch."""
    reset_rng = np.random.default_rng([seed, 3])
    records = []
    step = 0
    for epoch in range(epochs):
        sum_main = sum_distill = 0.0
        n = 0
        lr = schedule.base_lr
        for x, y in iterate_epoch(dataset, plan, epoch):
            lr = lr_at(step, schedule)
            try:
                fw = forward_all(model, pool, x)
                total, main, distill = compute_total_loss(fw.probs[0], fw.logits[0], fw.probs[1:], y, cfg,
                                                          return_parts=True)
            except tc.NumericError as exc:
                raise NonFiniteLossError(step, f"forward output ({exc})") from exc
            for name, t in (("loss_main", main), ("loss_distill", distill), ("loss_total", total)):
                if not _finite(t):
                    raise NonFiniteLossError(step, name)
            optimizer.zero_grad()
            tc.backward(total)
            optimizer.step(lr)
            update_meaningfulness(pool, fw.probs, y)
            b = len(y)
            sum_main += main.item() * b
            sum_distill += distill.item() * b if distill is not None else 0.0
            n += b
            step += 1
        pool.end_epoch()
        rec = MetricsRecord(
            epoch=epoch + 1,
            lr=lr,
            train_loss_main=sum_main / n,
            train_loss_distill=sum_distill / n,
            train_acc=list(pool.p),
            test_acc=evaluate(model, test, plan) if test is not None else float("nan"),
        )
        e = epoch + 1
        if cfg.K and cfg.T_update and e % cfg.T_update == 0:
            report = maybe_update_teachers(pool, model)
            rec.events.append(f"{'replaced' if report.replaced else 'kept'}:{report.index}")
            if event_log is not None:
                event_log(e, "update", report)
        if cfg.reset_mode != "none" and e % cfg.T_reset == 0:
            reset_student(model, pool, cfg, reset_rng, optimizer)
            rec.events.append(f"reset:{cfg.reset_mode}")
            if event_log is not None:
                event_log(e, "reset", cfg.reset_mode)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records


def train_plain(model, dataset, optimizer, seed, *, epochs, plan, schedule, test=None):
    """Reference SGD loop without teachers or resets, for degenerate-config comparisons."""
    records = []
    step = 0
    for epoch in range(epochs):
        sum_loss = 0.0
        n = correct = 0
        lr = schedule.base_lr
        for x, y in iterate_epoch(dataset, plan, epoch):
            lr = lr_at(step, schedule)
            logits = model.forward(Tensor(x))
            loss = tc.cross_entropy(logits, y)
            optimizer.zero_grad()
            tc.backward(loss)
            optimizer.step(lr)
            with tc.no_grad():
                probs = tc.softmax(logits.detach())
            correct += int((probs.data.argmax(axis=1) == y).sum())
            sum_loss += loss.item() * len(y)
            n += len(y)
            step += 1
        records.append(MetricsRecord(
            epoch=epoch + 1, lr=lr, train_loss_main=sum_loss / n, train_loss_distill=0.0,
            train_acc=[correct / n],
            test_acc=evaluate(model, test, plan) if test is not None else float("nan"),
        ))
    return records
