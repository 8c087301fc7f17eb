"""Run configuration, single runs, the K x T grid and seed statistics."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from .engine import DflConfig, MetricsRecord, NonFiniteLossError, init_pool, train
from .optim import SGD, LrSchedule

DATASETS = ("cifar10", "cifar100", "synthetic_images", "synthetic_vectors")
ARCHS = ("tiny_cnn", "tiny_mlp")


class ConfigError(ValueError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = "cifar100"
    data_dir: str = ""
    classes: int = 3
    n_per_class: int = 200
    n_test_per_class: int = 100
    image_size: int = 32
    dims: int = 8
    spread: float = 0.15
    data_seed: int = 0
    augment: tuple = ("crop_pad4", "hflip")
    # architecture
    arch: str = "tiny_cnn"
    hidden: int = 32
    init: str = "kaiming_uniform"
    # DFL
    K: int = 4
    T_update: int = 100
    T_reset: int = 100
    reset_mode: str = "mean"
    distill_weight: str = "mean_over_K"
    L: int = 3
    # optimization
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    milestones: tuple = (60, 120, 160)
    gamma: float = 0.2
    warmup_epochs: int = 1
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    out: str = "runs"

    def dfl(self):
        return DflConfig(self.K, self.T_update, self.T_reset, self.reset_mode, self.distill_weight, self.L)

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        bad = set(self.augment) - {"crop_pad4", "hflip"}
        if bad:
            raise ConfigError(f"unknown augmentation flags {sorted(bad)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        try:
            self.dfl()
            LrSchedule(self.lr, self.warmup_epochs, self.milestones, self.gamma, 1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


ALIASES = {"T": ("T_update", "T_reset"), "M": ("reset_mode",), "batch": ("batch_size",)}
_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _parse_value(name, raw):
    default = getattr(_DEFAULTS, name)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(int(s) for s in items) if name == "milestones" else tuple(items)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(raw)
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(raw)
        return v
    return raw


def parse_config(text):
    """Parse ``key=value`` lines (``#`` comments) over the defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        targets = ALIASES.get(key, (key,))
        for name in targets:
            if name not in _FIELDS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[name] = _parse_value(name, raw)
            except ValueError:
                raise ConfigError(f"line {lineno}: cannot parse {raw!r} for {key}") from None
    return RunConfig(**values).validate()


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg):
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def config_hash(cfg):
    text = format_config(replace(cfg, out=""))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def desk_config(**overrides):
    """Small synthetic-image setting that trains in seconds on one CPU core."""
    base = dict(dataset="synthetic_images", classes=3, n_per_class=200, n_test_per_class=100,
                image_size=16, spread=0.15, arch="tiny_cnn", K=2, T_update=5, T_reset=5,
                reset_mode="mean", L=1, lr=0.02, epochs=30, batch_size=128)
    base.update(overrides)
    return RunConfig(**base).validate()


# ---------------------------------------------------------------- building blocks


def load_datasets(cfg):
    if cfg.dataset in ("cifar10", "cifar100"):
        root = cfg.data_dir or os.environ.get("DFL_DATA_DIR", "")
        if not root:
            raise ConfigError("CIFAR needs data_dir or DFL_DATA_DIR")
        return D.load_cifar(root, cfg.dataset)
    kw = dict(dims=cfg.dims) if cfg.dataset == "synthetic_vectors" else \
        dict(image_shape=(3, cfg.image_size, cfg.image_size))
    train = D.synthetic_blobs(cfg.n_per_class, cfg.classes, spread=cfg.spread, seed=cfg.data_seed, **kw)
    test = D.synthetic_blobs(cfg.n_test_per_class, cfg.classes, spread=cfg.spread, seed=cfg.data_seed,
                             split="test", **kw)
    return train, test


def build_arch(cfg, train):
    if cfg.arch == "tiny_cnn":
        if not train.image_mode:
            raise ConfigError("tiny_cnn needs an image dataset")
        c, h, _ = train.images.shape[1:]
        return M.tiny_cnn(train.classes, c, h)
    if train.image_mode:
        raise ConfigError("tiny_mlp needs a vector dataset")
    return M.tiny_mlp(train.images.shape[1], train.classes, cfg.hidden)


def make_plan(cfg, train):
    mean, std = D.channel_stats(train)
    return D.BatchPlan(cfg.batch_size, cfg.seed, crop_pad4="crop_pad4" in cfg.augment,
                       hflip="hflip" in cfg.augment, mean=mean, std=std)


def setup(cfg):
    """Datasets, model, teacher pool, optimizer, schedule and batch plan for ``cfg``."""
    train_ds, test_ds = load_datasets(cfg)
    specs = build_arch(cfg, train_ds)
    model = M.build_model(specs, cfg.L, cfg.init, rng_seed=[cfg.seed, 0],
                          input_shape=train_ds.images.shape[1:])
    pool = init_pool(model, cfg.dfl(), np.random.default_rng([cfg.seed, 4]))
    opt = SGD(model.parameters, cfg.momentum, cfg.weight_decay)
    plan = make_plan(cfg, train_ds)
    sched = LrSchedule(cfg.lr, cfg.warmup_epochs, cfg.milestones, cfg.gamma,
                       plan.batches_per_epoch(len(train_ds)))
    return dict(train=train_ds, test=test_ds, model=model, pool=pool, optimizer=opt, plan=plan, schedule=sched)


# ---------------------------------------------------------------- metrics CSV


def fmt(x):
    return format(float(x), ".6g")


def metrics_header(K):
    return (["epoch", "lr", "train_loss_main", "train_loss_distill"]
            + [f"train_acc_{k}" for k in range(K + 1)] + ["test_acc", "events"])


def metrics_row(rec):
    return ([str(rec.epoch), fmt(rec.lr), fmt(rec.train_loss_main), fmt(rec.train_loss_distill)]
            + [fmt(a) for a in rec.train_acc] + [fmt(rec.test_acc), ";".join(rec.events)])


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_acc = sum(1 for h in header if h.startswith("train_acc_"))
        out = []
        for row in reader:
            accs = [float(v) for v in row[4:4 + n_acc]]
            out.append(MetricsRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]), accs,
                                     float(row[4 + n_acc]), [e for e in row[5 + n_acc].split(";") if e]))
    return out


# ---------------------------------------------------------------- runs


def run_dir_for(cfg):
    return Path(cfg.out) / f"run-{config_hash(cfg)}"


def run_single(cfg):
    """Train one configuration; returns the run directory.

    A directory holding a DONE marker is returned untouched, so reruns resume.
    """
    cfg.validate()
    rdir = run_dir_for(cfg)
    if (rdir / "DONE").exists():
        return rdir
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "effective-config.txt").write_text(format_config(cfg))
    parts = setup(cfg)
    plan = parts["plan"]
    with open(rdir / "metrics.csv", "w", newline="") as mfh, open(rdir / "events.log", "w") as efh:
        efh.write(f"# normalization mean={','.join(fmt(v) for v in plan.mean)} "
                  f"std={','.join(fmt(v) for v in plan.std)}\n")
        efh.write(f"# augmentation {','.join(cfg.augment) or 'none'} (crop+flip assumed as baseline default)\n")
        writer = csv.writer(mfh, lineterminator="\n")
        writer.writerow(metrics_header(cfg.K))
        mfh.flush()

        def on_epoch(rec):
            writer.writerow(metrics_row(rec))
            mfh.flush()

        def event_log(epoch, kind, payload):
            if kind == "update":
                efh.write(f"epoch={epoch} update k={payload.index} "
                          f"p={','.join(fmt(v) for v in payload.p)} replaced={payload.replaced}\n")
            else:
                efh.write(f"epoch={epoch} reset mode={payload}\n")
            efh.flush()

        try:
            train(parts["model"], parts["pool"], parts["train"], parts["optimizer"], cfg.dfl(), cfg.seed,
                  epochs=cfg.epochs, plan=plan, schedule=parts["schedule"], test=parts["test"],
                  on_epoch=on_epoch, event_log=event_log)
        except NonFiniteLossError as exc:
            efh.write(f"abort {exc}\n")
            raise
    M.save_checkpoint(parts["model"], rdir / "model.dflm")
    (rdir / "DONE").write_text("")
    return rdir


def final_test_acc(rdir):
    recs = read_metrics(Path(rdir) / "metrics.csv")
    if not recs:
        raise AggregationError(f"{rdir}: empty metrics.csv")
    return recs[-1].test_acc


# ---------------------------------------------------------------- statistics


def aggregate_seeds(finals):
    """Arithmetic mean and population (divide-by-n) standard deviation."""
    xs = [float(v) for v in finals]
    if len(xs) < 2:
        raise AggregationError(f"need at least 2 values, got {len(xs)}")
    n = len(xs)
    m = math.fsum(xs) / n
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in xs) / n)


def combine_group_stats(mean_a, std_a, mean_b, std_b):
    """Mean and population std of the union of two equal-size groups."""
    m = (mean_a + mean_b) / 2
    var = (std_a ** 2 + std_b ** 2) / 2 + ((mean_a - m) ** 2 + (mean_b - m) ** 2) / 2
    return m, math.sqrt(var)


def round_half_up(x, places=2):
    """Decimal rounding of the shortest repr, so 93.635 -> 93.64."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def pm(mean, std, places=2):
    return f"{round_half_up(mean, places):.{places}f} ± {round_half_up(std, places):.{places}f}"


# ---------------------------------------------------------------- grid


@dataclass
class GridRow:
    K: int
    T: int
    reset_mode: str
    finals: list
    failures: list
    mean: float = float("nan")
    std: float = float("nan")
    run_dirs: list = dataclasses.field(default_factory=list)


def _run_cell(cfg):
    try:
        rdir = run_single(cfg)
        return str(rdir), final_test_acc(rdir), None
    except Exception as exc:  # recorded per cell; the grid keeps going
        return None, None, f"{type(exc).__name__}: {exc}"


def grid_search(base, k_set, t_set, seeds, jobs=1, summary_path=None):
    """Run every (K, T, seed) cell; write and return the per-cell summary."""
    if not k_set or not t_set or not seeds:
        raise ConfigError("K, T and seed sets must be non-empty")
    cells = [(k, t) for k in k_set for t in t_set]
    cfgs = [replace(base, K=k, T_update=t, T_reset=t, seed=s) for k, t in cells for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_cell, cfgs))
    else:
        results = [_run_cell(c) for c in cfgs]
    rows = []
    it = iter(results)
    for k, t in cells:
        row = GridRow(k, t, base.reset_mode, [], [])
        for s in seeds:
            rdir, acc, err = next(it)
            if err is None:
                row.finals.append(acc)
                row.run_dirs.append(rdir)
            else:
                row.failures.append(f"seed={s}: {err}")
        if len(row.finals) >= 2:
            row.mean, row.std = aggregate_seeds(row.finals)
        elif row.finals:
            row.mean, row.std = row.finals[0], 0.0
        rows.append(row)
    path = Path(summary_path) if summary_path else Path(base.out) / "summary.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_summary(rows, base))
    return rows


def format_summary(rows, base):
    label = f"{base.arch}({base.L})"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "R", "T_cycle", "M", label, "mean", "std", "n", "failures"])
    for r in rows:
        reset = 0 if r.reset_mode == "none" else 1
        mcode = {"mean": 1, "random": 0}.get(r.reset_mode, "-")
        cell = pm(100 * r.mean, 100 * r.std) if r.finals else "failed"
        w.writerow([r.K, reset, r.T, mcode, cell, fmt(r.mean), fmt(r.std), len(r.finals), " | ".join(r.failures)])
    return buf.getvalue()


def collect_run_dirs(paths):
    out = []
    for p in map(Path, paths):
        if (p / "metrics.csv").exists():
            out.append(p)
        else:
            out.extend(sorted(d for d in p.iterdir() if (d / "metrics.csv").exists()))
    return out
