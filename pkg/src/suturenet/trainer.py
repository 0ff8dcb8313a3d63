"""Training loop, optimizer, checkpoints and cross-validation orchestration."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment as aug
from . import dataio, evaluation
from . import heatmap as hm
from . import tensorcore as tc
from . import unet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SUTURECK"
CHECKPOINT_VERSION = 1
_DTYPE_F64 = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def loss(pred, target):
    """``MSE - soft Dice`` over both output channels."""
    return tc.sub(tc.mse(pred, target), tc.soft_dice(pred, target))


# ----------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs_max: int = 200
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_patience: int = 10
    min_lr: float = 1e-6
    batch_size: int = 8
    seed: int = 0
    sigma: float = 1.0
    augment_enabled: bool = True
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    unet: unet.UNetConfig = field(default_factory=unet.UNetConfig)
    fold_seed_stride: int = 1000
    # re-estimate BN statistics without dropout after every epoch (see UNetModel.recalibrate_batchnorm)
    recalibrate_bn: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = aug.AugmentConfig.from_dict(self.augment)
        if isinstance(self.unet, dict):
            self.unet = unet.UNetConfig.from_dict(self.unet)
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 1 <= self.epochs_max <= 200:
            raise ValueError(f"epochs_max must be in [1, 200], got {self.epochs_max}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        d["unet"] = self.unet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # OrderedDict name -> Tensor
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {"t": self.t, "lr": self.lr,
                "m": OrderedDict((k, a.copy()) for k, a in self.m.items()),
                "v": OrderedDict((k, a.copy()) for k, a in self.v.items())}

    def load_state(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.1, patience=10, min_lr=1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.wait = 0
        return self.lr


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    unet_config: unet.UNetConfig
    arrays: OrderedDict
    optimizer: dict | None = None
    epoch: int = 0
    val_loss: float = float("nan")
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model, optimizer=None, epoch=0, val_loss=float("nan"), metadata=None):
        arrays = OrderedDict((k, np.array(a, copy=True)) for k, a in model.state_arrays().items())
        return cls(model.config, arrays, optimizer.state() if optimizer is not None else None,
                   epoch, float(val_loss), dict(metadata or {}))

    def model(self):
        m = unet.build(self.unet_config, np.random.default_rng(0))
        m.load_state_arrays(self.arrays)
        return m

    def save(self, path):
        header = {
            "unet": self.unet_config.to_dict(),
            "epoch": self.epoch,
            "val_loss": None if math.isnan(self.val_loss) else self.val_loss,
            "metadata": self.metadata,
            "optimizer": None if self.optimizer is None else {"t": self.optimizer["t"], "lr": self.optimizer["lr"]},
        }
        records = list(self.arrays.items())
        if self.optimizer is not None:
            records += [(f"optim.m.{k}", a) for k, a in self.optimizer["m"].items()]
            records += [(f"optim.v.{k}", a) for k, a in self.optimizer["v"].items()]
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", self.version, len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(records)))
            for name, arr in records:
                arr = np.ascontiguousarray(arr, dtype="<f8")
                nb = name.encode("utf-8")
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        pos = len(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            if tag != _DTYPE_F64:
                raise CheckpointError(f"{path}: record {name} has unsupported dtype tag {tag}")
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        optimizer = None
        if header.get("optimizer") is not None:
            optimizer = {
                "t": header["optimizer"]["t"], "lr": header["optimizer"]["lr"],
                "m": OrderedDict((k[len("optim.m."):], a) for k, a in arrays.items() if k.startswith("optim.m.")),
                "v": OrderedDict((k[len("optim.v."):], a) for k, a in arrays.items() if k.startswith("optim.v.")),
            }
        model_arrays = OrderedDict((k, a) for k, a in arrays.items() if not k.startswith("optim."))
        val = header.get("val_loss")
        return cls(unet.UNetConfig.from_dict(header["unet"]), model_arrays, optimizer,
                   int(header.get("epoch", 0)), float("nan") if val is None else float(val),
                   header.get("metadata", {}), version)


# ----------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    fold_id: int = 0
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)

    def append(self, epoch, train_loss, val_loss, lr):
        self.epochs.append((int(epoch), float(train_loss), float(val_loss), float(lr)))

    @property
    def best_epoch(self):
        if not self.epochs:
            return None
        eligible = [e for e in self.epochs if e[0] <= 200]
        best = min(eligible, key=lambda e: (e[2], e[0]))
        return best[0]

    @property
    def val_losses(self):
        return [e[2] for e in self.epochs]

    @property
    def train_losses(self):
        return [e[1] for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for ep, tl, vl, lr in self.epochs:
                w.writerow([ep, repr(tl), repr(vl), repr(lr)])

    @classmethod
    def read_csv(cls, path, fold_id=0):
        rec = cls(fold_id=fold_id)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec.append(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["lr"]))
        return rec


# ----------------------------------------------------------------------
# training


def _to_nchw(images):
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))


def predict_heatmaps(model, images, batch_size=4):
    """Foreground maps (``N x H x W``) from an infer-mode forward pass."""
    out = []
    for i in range(0, len(images), batch_size):
        y = model.forward(_to_nchw(images[i:i + batch_size]), mode="infer")
        out.extend(y.data[:, 0])
    return out


def evaluate_loss(model, samples, config):
    total, count = 0.0, 0
    shape = (config.unet.input_height, config.unet.input_width)
    for i in range(0, len(samples), config.batch_size):
        chunk = samples[i:i + config.batch_size]
        x = _to_nchw([s.image for s in chunk])
        target = hm.encode_batch([s.landmarks for s in chunk], shape, config.sigma)
        pred = model.forward(x, mode="infer")
        total += loss(pred, target).item() * len(chunk)
        count += len(chunk)
    return total / count


def _check_sample_shapes(samples, config, what):
    want = (config.unet.input_height, config.unet.input_width, config.unet.in_channels)
    for s in samples:
        if s.image.shape != want:
            raise ValueError(f"{what} sample {s.frame_id!r} has shape {s.image.shape}, expected {want}")


def train_fold(train_samples, val_samples, config, fold_id=0, model=None):
    """Train one model and return ``(best checkpoint, RunRecord)``.

    The best checkpoint is the epoch with the lowest validation loss (first
    on ties).
    """
    if not train_samples or not val_samples:
        raise ValueError("train_fold needs non-empty training and validation sets")
    _check_sample_shapes(train_samples, config, "training")
    _check_sample_shapes(val_samples, config, "validation")
    seed = config.seed
    if model is None:
        model = unet.build(config.unet, np.random.default_rng([seed, 0xC0FFEE]))
    opt = Adam(model.params, lr=config.initial_lr)
    sched = PlateauSchedule(config.initial_lr, config.lr_decay_factor, config.lr_patience, config.min_lr)
    shape = (config.unet.input_height, config.unet.input_width)
    record = RunRecord(fold_id=fold_id)
    best = None
    bs = config.batch_size

    for epoch in range(1, config.epochs_max + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_samples))
        running, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), bs)):
            idx = order[start:start + bs]
            images, points = [], []
            for i in idx:
                s = train_samples[i]
                if config.augment_enabled:
                    img, pts = aug.augment(s.image, s.landmarks, config.augment,
                                           np.random.default_rng([seed, epoch, int(i)]))
                else:
                    img, pts = s.image, s.landmarks
                images.append(img)
                points.append(pts)
            x = _to_nchw(images)
            target = hm.encode_batch(points, shape, config.sigma)
            opt.zero_grad()
            pred = model.forward(x, mode="train", rng=np.random.default_rng([seed, epoch, b, 1]))
            value = loss(pred, target)
            lv = value.item()
            if not math.isfinite(lv):
                raise TrainingDivergedError(f"non-finite loss {lv} at epoch {epoch}, batch {b}")
            value.backward()
            opt.step()
            running += lv * len(idx)
            seen += len(idx)
        train_loss = running / seen
        if config.recalibrate_bn:
            model.recalibrate_batchnorm(_to_nchw([s.image for s in train_samples[i:i + bs]])
                                        for i in range(0, len(train_samples), bs))
        val_loss = evaluate_loss(model, val_samples, config)
        lr_used = opt.lr
        record.append(epoch, train_loss, val_loss, lr_used)
        if best is None or val_loss < best.val_loss:
            best = Checkpoint.from_model(model, opt, epoch, val_loss, {"fold": fold_id})
        opt.lr = sched.step(val_loss)
        logger.info("fold %d epoch %d train %.5f val %.5f lr %.1e (%.1fs)",
                    fold_id, epoch, train_loss, val_loss, lr_used, time.perf_counter() - t0)
    return best, record


# ----------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    folds: list
    records: list
    checkpoints: list
    per_fold_counts: list
    curve: list
    thresholds: list
    access_logs: list  # per fold: {"train": [...], "evaluation": [...]}
    fold_surgeries: dict = field(default_factory=dict)


def fold_seed(config, fold_index):
    return int(config.seed) + int(config.fold_seed_stride) * (fold_index + 1)


def run_cv(manifest, k, config, out_dir=None, thresholds=None, folds=None):
    """Train one model per surgery-level fold and sweep the validation curves."""
    thresholds = evaluation.default_thresholds() if thresholds is None else list(thresholds)
    cv_entries = manifest.select(usage="cv")
    if folds is None:
        folds = dataio.make_folds([e.surgery_id for e in cv_entries], k, np.random.default_rng(config.seed))
    size = (config.unet.input_width, config.unet.input_height)
    records, ckpts, counts, logs = [], [], [], []
    for i, (train_ids, val_ids) in enumerate(folds):
        if set(train_ids) & set(val_ids):
            raise ValueError(f"fold {i}: surgeries {sorted(set(train_ids) & set(val_ids))} on both sides")
        log = {"train": [], "evaluation": []}
        train_samples = dataio.load_samples(manifest, manifest.select(train_ids, usage="cv"), size, log["train"])
        val_samples = dataio.load_samples(manifest, manifest.select(val_ids, usage="cv"), size, log["evaluation"])
        fold_cfg = TrainConfig.from_dict({**config.to_dict(), "seed": fold_seed(config, i)})
        ckpt, record = train_fold(train_samples, val_samples, fold_cfg, fold_id=i)
        ckpt.metadata.update({"fold": i, "train_surgeries": list(train_ids), "validation_surgeries": list(val_ids),
                              "train_config": fold_cfg.to_dict()})
        model = ckpt.model()
        heatmaps = predict_heatmaps(model, [s.image for s in val_samples], fold_cfg.batch_size)
        counts.append(evaluation.fold_counts(heatmaps, [s.landmarks for s in val_samples], thresholds))
        records.append(record)
        ckpts.append(ckpt)
        logs.append(log)
        if out_dir is not None:
            fdir = os.path.join(out_dir, f"fold_{i}")
            os.makedirs(fdir, exist_ok=True)
            ckpt.save(os.path.join(fdir, "best.ckpt"))
            record.write_csv(os.path.join(fdir, "run_record.csv"))
    curve = evaluation.aggregate(counts, thresholds)
    result = CVResult(folds=[(list(t), list(v)) for t, v in folds], records=records, checkpoints=ckpts,
                      per_fold_counts=counts, curve=curve, thresholds=thresholds, access_logs=logs)
    if out_dir is not None:
        evaluation.write_curve_csv(curve, os.path.join(out_dir, "curves.csv"))
        write_summary(result, os.path.join(out_dir, "summary.json"))
    return result


def write_summary(result, path):
    folds = []
    for i, ((train_ids, val_ids), rec, ck) in enumerate(zip(result.folds, result.records, result.checkpoints)):
        folds.append({
            "fold": i,
            "train_surgeries": train_ids,
            "validation_surgeries": val_ids,
            "best_epoch": rec.best_epoch,
            "best_val_loss": ck.val_loss,
            "checkpoint": f"fold_{i}/best.ckpt",
            "run_record": f"fold_{i}/run_record.csv",
        })
    with open(path, "w") as fh:
        json.dump({"folds": folds}, fh, indent=2, sort_keys=True)
        fh.write("\n")
