"""SGD training loop, grading metrics, and binary checkpoint persistence."""

from __future__ import annotations

import json
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import ContractError, DegenerateRowError, ShapeError, Tensor
from .attention import CfaConfig
from .encoder import EncoderConfig
from .model import CrossFiTConfig, CrossFiTModel

__all__ = [
    "TrainConfig", "TrainingDiverged", "CheckpointError", "MetricsReport",
    "sgd_momentum_step", "quadratic_weighted_kappa", "roc_auc_ovr",
    "predict_dataset", "evaluate", "train", "Checkpoint", "save_checkpoint",
    "load_checkpoint", "model_config_to_dict", "model_config_from_dict",
    "build_model_from_checkpoint",
]

CHECKPOINT_MAGIC = b"CFIT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; carries the epoch/step where it happened."""


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint data."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    hflip: bool = True

    def __post_init__(self):
        # lr = 0 is allowed (freezes parameters, useful as a sanity mode)
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractError("negative optimizer hyperparameter")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch size must be >= 1 and epochs >= 0")


def sgd_momentum_step(params: dict[str, Tensor], velocities: dict[str, np.ndarray],
                      cfg: TrainConfig) -> None:
    """Classic momentum with coupled weight decay:
    v <- mu*v + g + wd*theta;  theta <- theta - lr*v."""
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient/parameter shape mismatch on {name}")
        v = velocities[name]
        v *= cfg.momentum
        v += p.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data -= cfg.lr * v


# ---------------------------------------------------------------------------
# metrics


def quadratic_weighted_kappa(confusion: np.ndarray) -> float:
    """Chance-corrected agreement with squared-distance weights.

    w_ij = (i-j)^2 / (C-1)^2, kappa = 1 - sum(w*O) / sum(w*E) where E is the
    outer product of the marginals scaled to the total count. A confusion
    with all mass on one diagonal cell makes both sums zero; that is perfect
    agreement, so kappa is 1.
    """
    o = np.asarray(confusion, dtype=np.float64)
    if o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ShapeError(f"confusion must be square, got {o.shape}")
    total = o.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    c = o.shape[0]
    idx = np.arange(c)
    w = (idx[:, None] - idx[None, :]) ** 2 / max((c - 1) ** 2, 1)
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / total
    denom = (w * e).sum()
    if denom == 0.0:
        return 1.0
    return float(1.0 - (w * o).sum() / denom)


def roc_auc_ovr(scores: np.ndarray, positives: np.ndarray) -> float | None:
    """Probability a random positive outranks a random negative, ties 0.5.

    Returns None when only one class is present (AUC undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks handle ties as 0.5
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    kappa: float
    accuracy: float
    macro_auc: float | None
    per_class_auc: list
    confusion: np.ndarray
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "accuracy": self.accuracy,
            "macro_auc": self.macro_auc,
            "per_class_auc": self.per_class_auc,
            "confusion": self.confusion.astype(int).tolist(),
            "n_samples": self.n_samples,
        }


def predict_dataset(model: CrossFiTModel, dataset, batch_size: int = 32):
    """Deterministic full pass; returns (predicted grades, probabilities)."""
    n = len(dataset.grades)
    grades = np.zeros(n, dtype=np.int64)
    probs = np.zeros((n, model.cfg.num_classes))
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        preds = model.predict_batch(dataset.images1[sl], dataset.images2[sl],
                                    dataset.od1[sl], dataset.od2[sl])
        for i, pred in enumerate(preds):
            grades[start + i] = pred.grade
            probs[start + i] = pred.probabilities
    return grades, probs


def metrics_from_predictions(labels: np.ndarray, grades: np.ndarray,
                             probs: np.ndarray, num_classes: int) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise ContractError("empty evaluation set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, grades), 1)
    accuracy = float(np.trace(confusion)) / n
    assert accuracy == float((grades == labels).mean())  # streamed consistency
    per_class = []
    for c in range(num_classes):
        auc = roc_auc_ovr(probs[:, c], labels == c)
        if auc is None:
            warnings.warn(f"class {c} absent or universal in eval split; "
                          f"its AUC is undefined and excluded from the macro mean")
        per_class.append(auc)
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else None
    return MetricsReport(quadratic_weighted_kappa(confusion), accuracy,
                         macro, per_class, confusion, n)


def evaluate(model: CrossFiTModel, dataset, batch_size: int = 32) -> MetricsReport:
    grades, probs = predict_dataset(model, dataset, batch_size)
    return metrics_from_predictions(dataset.grades, grades, probs,
                                    model.cfg.num_classes)


# ---------------------------------------------------------------------------
# training


def _flip_horizontal(imgs1, imgs2, od1, od2, which: np.ndarray):
    imgs1 = imgs1.copy()
    imgs2 = imgs2.copy()
    od1 = od1.copy()
    od2 = od2.copy()
    imgs1[which] = imgs1[which, :, ::-1]
    imgs2[which] = imgs2[which, :, ::-1]
    od1[which, 0] = 1.0 - od1[which, 0]
    od2[which, 0] = 1.0 - od2[which, 0]
    return imgs1, imgs2, od1, od2


def train(model: CrossFiTModel, train_set, cfg: TrainConfig, on_epoch=None):
    """Epochs of shuffled minibatch SGD; returns (checkpoint, per-epoch losses).

    Fully determined by cfg.seed: shuffling and flip augmentation draw from
    one dedicated stream, and nothing else is stochastic. `on_epoch`, when
    given, is called as on_epoch(epoch_index, mean_loss) after every epoch.
    """
    rng = ad.make_rng(cfg.seed)
    params = model.named_parameters()
    velocities = {name: np.zeros_like(p.data) for name, p in params.items()}
    n = len(train_set.grades)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            i1 = train_set.images1[take]
            i2 = train_set.images2[take]
            o1 = train_set.od1[take]
            o2 = train_set.od2[take]
            labels = train_set.grades[take]
            if cfg.hflip:
                which = rng.uniform(size=len(take)) < 0.5
                if which.any():
                    i1, i2, o1, o2 = _flip_horizontal(i1, i2, o1, o2, which)
            try:
                loss = model.loss_batch(i1, i2, o1, o2, labels)
            except DegenerateRowError as exc:
                # overflow inside attention (every logit -inf) is the same
                # blow-up as a non-finite loss, caught one op earlier
                ad.active_tape().clear()
                raise TrainingDiverged(
                    f"forward pass degenerated at epoch {epoch} step {step}") from exc
            value = loss.item()
            if not np.isfinite(value):
                ad.active_tape().clear()
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {step}")
            ad.backward(loss)
            sgd_momentum_step(params, velocities, cfg)
            for p in params.values():
                p.grad = None
            epoch_loss += value
            batches += 1
            step += 1
        history.append(epoch_loss / max(batches, 1))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    ckpt = Checkpoint.from_model(model, train_cfg=cfg, velocities=velocities, step=step)
    return ckpt, history


# ---------------------------------------------------------------------------
# checkpoint persistence


def model_config_to_dict(cfg: CrossFiTConfig) -> dict:
    return {
        "encoder": {"stage_channels": list(cfg.encoder.stage_channels),
                    "stride": list(cfg.encoder.strides),
                    "kernel": list(cfg.encoder.kernels),
                    "input_size": cfg.encoder.input_size},
        "cfa": {"layers": cfg.cfa.layers, "heads": cfg.cfa.heads,
                "d_t": cfg.cfa.d_t, "mlp_ratio": cfg.cfa.mlp_ratio,
                "threshold": cfg.cfa.threshold,
                "zero_init_out": cfg.cfa.zero_init_out},
        "strategy": cfg.strategy,
        "pe_mode": cfg.pe_mode,
        "mask_enabled": cfg.mask_enabled,
        "num_classes": cfg.num_classes,
        "grid_size": cfg.grid_size,
    }


def _int_or_tuple(v) -> int | tuple[int, ...]:
    return v if isinstance(v, int) else tuple(v)


def model_config_from_dict(d: dict) -> CrossFiTConfig:
    enc = d["encoder"]
    cfa = d["cfa"]
    return CrossFiTConfig(
        encoder=EncoderConfig(stage_channels=tuple(enc["stage_channels"]),
                              stride=_int_or_tuple(enc["stride"]),
                              kernel=_int_or_tuple(enc["kernel"]),
                              input_size=enc["input_size"]),
        cfa=CfaConfig(layers=cfa["layers"], heads=cfa["heads"], d_t=cfa["d_t"],
                      mlp_ratio=cfa["mlp_ratio"], threshold=cfa["threshold"],
                      zero_init_out=cfa.get("zero_init_out", False)),
        strategy=d["strategy"], pe_mode=d["pe_mode"],
        mask_enabled=d["mask_enabled"], num_classes=d["num_classes"],
        grid_size=d.get("grid_size"))


@dataclass
class Checkpoint:
    """Named float32 tensors plus the configs needed to rebuild the model."""

    config: dict
    tensors: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def from_model(cls, model: CrossFiTModel, train_cfg: TrainConfig | None = None,
                   velocities: dict | None = None, step: int = 0) -> "Checkpoint":
        tensors = OrderedDict()
        for name, p in model.parameters():
            tensors[f"param/{name}"] = p.data.astype(np.float32)
        if velocities:
            for name, v in velocities.items():
                tensors[f"vel/{name}"] = v.astype(np.float32)
        config = {"model": model_config_to_dict(model.cfg)}
        if train_cfg is not None:
            config["train"] = {"lr": train_cfg.lr, "momentum": train_cfg.momentum,
                               "weight_decay": train_cfg.weight_decay,
                               "batch_size": train_cfg.batch_size,
                               "epochs": train_cfg.epochs, "seed": train_cfg.seed,
                               "hflip": train_cfg.hflip}
        return cls(config, tensors, step)

    def restore(self, model: CrossFiTModel) -> None:
        """Copy parameters into a compatible model; validates every name and
        shape before touching anything, so a mismatch never partially loads."""
        params = model.named_parameters()
        staged = []
        for name, p in params.items():
            key = f"param/{name}"
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            stored = self.tensors[key]
            if tuple(stored.shape) != tuple(p.data.shape):
                raise CheckpointError(
                    f"shape mismatch on {key}: checkpoint {stored.shape} "
                    f"vs model {p.data.shape}")
            staged.append((p, stored))
        for p, stored in staged:
            p.data = stored.astype(p.data.dtype).copy()


def build_model_from_checkpoint(ckpt: Checkpoint,
                                rng: np.random.Generator | None = None) -> CrossFiTModel:
    cfg = model_config_from_dict(ckpt.config["model"])
    model = CrossFiTModel(rng or ad.make_rng(0), cfg)
    ckpt.restore(model)
    return model


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    index = []
    offset = 0
    payloads = []
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "length": len(data)})
        payloads.append(data)
        offset += len(data)
    header = {"config": ckpt.config, "tensors": index,
              "payload_bytes": offset, "train_state": {"step": ckpt.step}}
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for data in payloads:
            fh.write(data)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<I", blob[6:10])
    header_end = 10 + header_len
    if len(blob) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[10:header_end].decode("utf-8"))
    payload = blob[header_end:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of "
            f"{header['payload_bytes']} bytes)")
    tensors = OrderedDict()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        off, length = entry["offset"], entry["length"]
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != expected or off + length > len(payload):
            raise CheckpointError(f"{path}: corrupt index entry for tensor {name}")
        tensors[name] = np.frombuffer(
            payload[off:off + length], dtype="<f4").reshape(shape).copy()
    return Checkpoint(header["config"], tensors, header["train_state"]["step"])
