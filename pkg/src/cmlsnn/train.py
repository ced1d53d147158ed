"""Training loop, run configuration, metrics and run comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import functional as F
from .autodiff import SurrogateConfig, Tape
from .data import Dataset, SynthSpec, default_data_dir, gen_synthetic, load_cifar10
from .downsample import VARIANT_LABELS, Variant
from .layers import LifParams
from .model import SpikingClassifier
from .optim import OPTIMIZERS
from .tensor import DTYPES

log = logging.getLogger(__name__)

# published CIFAR top-1 accuracies (%), T=4, 400 epochs, for reference only
PUBLISHED_ACCURACY = {
    "Spikingformer-4-384-400E": {
        "baseline": {"CIFAR10": 95.81, "CIFAR100": 79.21},
        "cml": {"CIFAR10": 95.95, "CIFAR100": 80.37},
        "avgpool": {"CIFAR10": 95.23, "CIFAR100": 78.52},
        "strideconv": {"CIFAR10": 94.94, "CIFAR100": 78.65},
    },
    "Spikformer-4-384-400E": {
        "baseline": {"CIFAR10": 95.51, "CIFAR100": 78.21},
        "cml": {"CIFAR10": 96.04, "CIFAR100": 80.02},
        "avgpool": {"CIFAR10": 95.13, "CIFAR100": 78.53},
        "strideconv": {"CIFAR10": 94.93, "CIFAR100": 78.02},
    },
}
# CML minus baseline, percentage points
PUBLISHED_CML_DELTAS = {
    "Spikformer-4-384-400E": {"CIFAR10": 0.53, "CIFAR100": 1.81},
    "Spikingformer-4-384-400E": {"CIFAR10": 0.14, "CIFAR100": 1.16},
}


class DivergenceError(RuntimeError):
    pass


class CompareError(ValueError):
    pass


@dataclass
class RunConfig:
    arch: str = "cml"
    dataset: str = "synth"
    data_dir: str | None = None
    timesteps: int = 4
    epochs: int = 5
    batch: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    precision: str = "f32"
    out: str | None = None
    widths: tuple = (8, 16)
    full_bptt: bool = False
    # re-evaluate the whole training set after each epoch; when off, train
    # loss/accuracy are running means over the epoch's batches
    eval_train: bool = True
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    alpha: float = 4.0
    # cifar10
    per_class: int | None = None
    test_per_class: int | None = None
    # synth
    synth_classes: int = 4
    synth_size: int = 16
    synth_per_class: int = 32
    synth_test_per_class: int = 16
    synth_noise: float = 0.0

    def __post_init__(self):
        self.arch = Variant(self.arch).value
        self.widths = tuple(int(w) for w in self.widths)
        if self.dataset not in ("synth", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")
        for name in ("timesteps", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(n_classes=self.synth_classes, image_size=self.synth_size,
                         samples_per_class=self.synth_per_class,
                         test_per_class=self.synth_test_per_class, noise=self.synth_noise,
                         seed=self.seed)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    train_accuracy: float
    wall_time: float
    lif_updates: int
    batch_loss: float | None = None

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    config: RunConfig
    records: list
    model: SpikingClassifier
    dataset_id: str
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "synth":
        # same data for every seed so runs stay comparable; seed only drives training
        spec = dataclasses.replace(cfg.synth_spec(), seed=0)
        ds = gen_synthetic(spec)
    else:
        ds = load_cifar10(cfg.data_dir or default_data_dir(), cfg.per_class, cfg.test_per_class)
    return ds.astype(DTYPES[cfg.precision])


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.name.encode())
    for arr in (ds.x_train, ds.y_train, ds.x_test, ds.y_test):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def build_model(cfg: RunConfig, ds: Dataset) -> SpikingClassifier:
    return SpikingClassifier(
        in_channels=ds.image_shape[0], n_classes=ds.n_classes, variant=cfg.arch,
        timesteps=cfg.timesteps, widths=cfg.widths,
        lif_params=LifParams(cfg.tau, cfg.v_threshold, cfg.v_reset),
        surrogate=SurrogateConfig(alpha=cfg.alpha), full_bptt=cfg.full_bptt,
        seed=cfg.seed, dtype=DTYPES[cfg.precision],
    )


def evaluate(model: SpikingClassifier, x, y, batch=256):
    """Mean loss and accuracy in eval mode."""
    model.train(False)
    total_loss = 0.0
    correct = 0
    for i in range(0, len(x), batch):
        tape = Tape()
        logits = model.forward(tape, x[i:i + batch])
        loss = F.cross_entropy(logits, y[i:i + batch])
        total_loss += float(loss.data) * len(logits.data)
        correct += int((logits.data.argmax(axis=1) == y[i:i + batch]).sum())
        tape.release()
    model.train(True)
    return total_loss / len(x), correct / len(x)


def train(cfg: RunConfig, dataset: Dataset | None = None) -> RunResult:
    """Train one classifier; writes metrics under ``cfg.out`` when set.

    Record 0 is the untrained model; record ``e`` follows epoch ``e``.
    """
    ds = dataset if dataset is not None else load_dataset(cfg)
    ds_id = dataset_fingerprint(ds)
    model = build_model(cfg, ds)
    params = model.parameters()
    opt = OPTIMIZERS[cfg.optimizer](params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    lif_updates = model.lif_updates_per_sample(ds.image_shape)
    out = Path(cfg.out) if cfg.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        (out / "metrics.jsonl").write_text("")

    start = time.perf_counter()
    records = []

    def emit(rec: MetricsRecord):
        records.append(rec)
        log.info("epoch %d train_loss %.4f test_acc %.4f", rec.epoch, rec.train_loss, rec.test_accuracy)
        if out:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec.to_dict()) + "\n")

    def snapshot(epoch, batch_loss, running=None):
        if running is not None and not cfg.eval_train:
            train_loss, train_acc = running
        else:
            train_loss, train_acc = evaluate(model, ds.x_train, ds.y_train)
        test_loss, test_acc = evaluate(model, ds.x_test, ds.y_test)
        return MetricsRecord(epoch, train_loss, test_loss, test_acc, train_acc,
                             time.perf_counter() - start, lif_updates, batch_loss)

    emit(snapshot(0, None))
    n = len(ds.x_train)
    status = "ok"
    for epoch in range(1, cfg.epochs + 1):
        model.train(True)
        perm = rng.permutation(n)
        batch_losses = []
        correct = 0
        for i in range(0, n, cfg.batch):
            idx = perm[i:i + cfg.batch]
            tape = Tape()
            logits = model.forward(tape, ds.x_train[idx])
            loss = F.cross_entropy(logits, ds.y_train[idx])
            value = float(loss.data)
            grads = None
            if math.isfinite(value):
                tape.backward(loss)
                grads = [tape.grad_of(p) for p in params]
            tape.release()
            # hard spikes map NaN membranes to 0, so a blow-up can hide from the loss
            if grads is None or not all(np.isfinite(g).all() for g in grads):
                status = "diverged"
                where = "loss" if grads is None else "gradient"
                diag = {"status": status, "epoch": epoch, "batch_start": int(i), "loss": repr(value),
                        "non_finite": where}
                if out:
                    with open(out / "metrics.jsonl", "a") as fh:
                        fh.write(json.dumps(diag) + "\n")
                    _write_final(out, cfg, records, ds_id, model, status, diag)
                raise DivergenceError(f"non-finite {where} at epoch {epoch}, batch offset {i}")
            opt.step(grads)
            batch_losses.append(value)
            correct += int((logits.data.argmax(axis=1) == ds.y_train[idx]).sum())
        sizes = [min(cfg.batch, n - i) for i in range(0, n, cfg.batch)]
        mean_loss = float(np.average(batch_losses, weights=sizes))
        emit(snapshot(epoch, float(np.mean(batch_losses)), (mean_loss, correct / n)))

    result = RunResult(cfg, records, model, ds_id, status)
    if out:
        _write_csv(out / "metrics.csv", records)
        _write_final(out, cfg, records, ds_id, model, status)
    return result


def _write_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].to_dict()))
        writer.writeheader()
        for r in records:
            writer.writerow(r.to_dict())


def _write_final(out, cfg, records, ds_id, model, status, diagnostic=None):
    payload = {
        "status": status,
        "config": cfg.to_dict(),
        "dataset_id": ds_id,
        "arch_label": VARIANT_LABELS[Variant(cfg.arch)],
        "kernel_backend": _kernels.BACKEND,
        "final": records[-1].to_dict() if records else None,
        "epochs_recorded": len(records),
    }
    if diagnostic:
        payload["diagnostic"] = diagnostic
    (Path(out) / "final.json").write_text(json.dumps(payload, indent=2))


def _load_run(run) -> dict:
    if isinstance(run, RunResult):
        return {"config": run.config.to_dict(), "dataset_id": run.dataset_id,
                "final": run.final.to_dict(), "status": run.status, "source": "memory"}
    path = Path(run)
    if path.is_dir():
        path = path / "final.json"
    if not path.is_file():
        raise FileNotFoundError(f"no final.json for run {run}")
    data = json.loads(path.read_text())
    data["source"] = str(path.parent)
    return data


def compare(runs, out=None) -> dict:
    """Align finished runs into a variant table; pairs seeds against the baseline.

    Refuses fewer than two runs or runs trained on different data.
    """
    runs = [_load_run(r) for r in runs]
    if len(runs) < 2:
        raise CompareError("compare needs at least two runs")
    ids = {r["dataset_id"] for r in runs}
    if len(ids) != 1:
        raise CompareError(f"runs were trained on different datasets: {sorted(ids)}")

    rows = []
    for r in runs:
        cfg, fin = r["config"], r["final"]
        rows.append({
            "arch": cfg["arch"],
            "method": VARIANT_LABELS[Variant(cfg["arch"])],
            "seed": cfg["seed"],
            "timesteps": cfg["timesteps"],
            "epochs": cfg["epochs"],
            "test_accuracy": fin["test_accuracy"],
            "train_accuracy": fin["train_accuracy"],
            "lif_updates": fin["lif_updates"],
            "wall_time": fin["wall_time"],
            "status": r.get("status", "ok"),
        })
    order = [v.value for v in Variant]
    rows.sort(key=lambda row: (order.index(row["arch"]), row["seed"]))

    variants = {}
    for arch in order:
        sel = [row for row in rows if row["arch"] == arch]
        if not sel:
            continue
        accs = [row["test_accuracy"] for row in sel]
        variants[arch] = {
            "method": VARIANT_LABELS[Variant(arch)],
            "runs": len(sel),
            "mean_test_accuracy": float(np.mean(accs)),
            "std_test_accuracy": float(np.std(accs)),
            "lif_updates": sel[0]["lif_updates"],
            "mean_wall_time": float(np.mean([row["wall_time"] for row in sel])),
        }

    paired = {}
    base = {row["seed"]: row for row in rows if row["arch"] == "baseline"}
    for arch in order[1:]:
        deltas = {row["seed"]: 100.0 * (row["test_accuracy"] - base[row["seed"]]["test_accuracy"])
                  for row in rows if row["arch"] == arch and row["seed"] in base}
        if deltas:
            mean = float(np.mean(list(deltas.values())))
            paired[arch] = {"per_seed_delta_pp": deltas, "mean_delta_pp": mean,
                            "sign": int(np.sign(mean))}
    if "baseline" in variants and "cml" in variants:
        ratio = variants["baseline"]["lif_updates"] / variants["cml"]["lif_updates"]
    else:
        ratio = None

    table = {
        "dataset_id": ids.pop(),
        "rows": rows,
        "variants": variants,
        "paired_vs_baseline": paired,
        "lif_update_ratio_baseline_over_cml": ratio,
        "published_reference": {"accuracy": PUBLISHED_ACCURACY, "cml_minus_baseline_pp": PUBLISHED_CML_DELTAS,
                                "note": "full-scale 400-epoch results; not comparable to desk-scale runs"},
    }
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(table, indent=2))
        with open(out / "comparison.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return table


def run_paired(cfg: RunConfig, archs=("baseline", "cml"), seeds=range(5), out=None) -> dict:
    """Train every ``arch`` under every seed on one dataset, then :func:`compare`.

    Everything except ``arch`` and ``seed`` comes from ``cfg``.  Run
    directories go under ``out`` (``<arch>-s<seed>``) when it is set.
    """
    ds = load_dataset(cfg)
    start = time.perf_counter()
    results = []
    for seed in seeds:
        for arch in archs:
            run_out = str(Path(out) / f"{arch}-s{seed}") if out else None
            run_cfg = dataclasses.replace(cfg, arch=arch, seed=seed, out=run_out)
            log.info("paired run %s seed %d", arch, seed)
            results.append(train(run_cfg, dataset=ds))
    table = compare(results, out=out)
    table["total_wall_time"] = time.perf_counter() - start
    if out:
        (Path(out) / "comparison.json").write_text(json.dumps(table, indent=2))
    return table
