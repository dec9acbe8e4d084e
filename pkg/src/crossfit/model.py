"""End-to-end two-field grading model and the baseline fusion strategies.

The full pipeline encodes both fields with one shared CNN, masks redundant
tokens, projects to transformer width, adds per-field position embeddings,
runs the cross-field attention stack, pools each field to a global vector,
fuses by elementwise max, and classifies.

Baselines reuse the pieces: feature-level strategies pool the raw encoder
maps and fuse before one classifier (no attention parameters exist at all);
decision-level strategies train a single-field network on both fields with
the shared label and combine the two predictions only at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor
from .attention import CfaConfig, CfaStack, masks_from_features
from .encoder import Encoder, EncoderConfig
from .geometry import RelCoord, aligned_position_embeddings, regular_position_embedding

__all__ = [
    "STRATEGIES", "PE_MODES", "CrossFiTConfig", "Prediction", "CrossFiTModel",
    "global_pool", "fuse", "softmax_np",
]

STRATEGIES = ("crossfit", "feat_max", "feat_avg", "feat_concat",
              "pred_avg", "pred_max", "single_field_1", "single_field_2")
PE_MODES = ("aligned", "regular", "learnable", "none")

_FEATURE_STRATEGIES = ("feat_max", "feat_avg", "feat_concat")
_DECISION_STRATEGIES = ("pred_avg", "pred_max")
_SINGLE_STRATEGIES = ("single_field_1", "single_field_2")


@dataclass(frozen=True)
class CrossFiTConfig:
    encoder: EncoderConfig = dc_field(default_factory=EncoderConfig)
    cfa: CfaConfig = dc_field(default_factory=CfaConfig)
    strategy: str = "crossfit"
    pe_mode: str = "aligned"
    mask_enabled: bool = True
    num_classes: int = 5
    grid_size: int | None = None  # image-plane grid side; defaults to input size

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; one of {STRATEGIES}")
        if self.pe_mode not in PE_MODES:
            raise ContractError(f"unknown pe mode {self.pe_mode!r}; one of {PE_MODES}")
        if self.num_classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.num_classes}")

    @property
    def tokens_per_field(self) -> int:
        return self.encoder.feature_side ** 2

    @property
    def image_grid_side(self) -> int:
        return self.grid_size if self.grid_size is not None else self.encoder.input_size


def softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    grade: int

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        logits = np.asarray(logits, dtype=np.float64)
        probs = softmax_np(logits)
        return cls(logits, probs, int(np.argmax(probs)))


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """(b, l, d) sequences -> (b, d) vectors; rows with mask bit 0 contribute
    nothing. Plain mean when masking is off."""
    if mask is None:
        return ad.mean_(x, axes=1)
    weights = mask / mask.sum(axis=1, keepdims=True)
    return ad.sum_(ad.mul(x, Tensor(weights[:, :, None].astype(x.dtype))), axes=1)


def global_pool(g: Tensor, m=None) -> Tensor:
    """Single-sequence (l, d_t) masked mean; `m` is a FundusMask, bit array,
    or None for the unmasked mean."""
    bits = None
    if m is not None:
        bits = np.asarray(getattr(m, "bits", m), dtype=np.float64)[None, :]
    lifted = ad.reshape(g, (1,) + g.shape)
    return ad.reshape(_masked_mean(lifted, bits), (g.shape[-1],))


def fuse(g1: Tensor, g2: Tensor, strategy: str) -> Tensor:
    if strategy == "feat_max" or strategy == "crossfit":
        return ad.maximum(g1, g2)
    if strategy == "feat_avg":
        return ad.scale(ad.add(g1, g2), 0.5)
    if strategy == "feat_concat":
        return ad.concat([g1, g2], axis=-1)
    raise ContractError(f"{strategy!r} is not a feature-level strategy")


class CrossFiTModel:
    """Owns every parameter its strategy needs, and nothing more."""

    def __init__(self, rng: np.random.Generator, cfg: CrossFiTConfig):
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg.encoder)
        d_e, d_t, c = cfg.encoder.d_e, cfg.cfa.d_t, cfg.num_classes
        self.proj = None
        self.stack = None
        self.pe_table = None
        self._pe_regular = None
        if cfg.strategy == "crossfit":
            self.proj = ad.Linear(rng, d_e, d_t)
            self.stack = CfaStack(rng, cfg.cfa)
            self.head = ad.Linear(rng, d_t, c)
            if cfg.pe_mode == "learnable":
                table = rng.normal(0.0, 0.02, size=(2 * cfg.tokens_per_field, d_t))
                self.pe_table = ad.parameter(table.astype(ad.default_dtype()))
        elif cfg.strategy == "feat_concat":
            self.head = ad.Linear(rng, 2 * d_e, c)
        else:
            self.head = ad.Linear(rng, d_e, c)

    # -- parameter registry ------------------------------------------------

    def parameters(self):
        yield from self.encoder.parameters()
        if self.proj is not None:
            for name, t in self.proj.parameters():
                yield f"proj.{name}", t
        if self.pe_table is not None:
            yield "pe.table", self.pe_table
        if self.stack is not None:
            yield from self.stack.parameters()
        for name, t in self.head.parameters():
            yield f"head.{name}", t

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.parameters())

    # -- internal batched pipeline ------------------------------------------

    def _encode_fields(self, imgs1: np.ndarray, imgs2: np.ndarray):
        """Channels-last [0,1] image batches -> feature tensors + mask bits."""
        dt = ad.default_dtype()
        x1 = self.encoder(Tensor(np.moveaxis(imgs1, 3, 1).astype(dt)))
        x2 = self.encoder(Tensor(np.moveaxis(imgs2, 3, 1).astype(dt)))
        m1 = m2 = None
        if self.cfg.mask_enabled:
            p = self.cfg.cfa.threshold
            m1 = masks_from_features(x1.data, p)
            m2 = masks_from_features(x2.data, p)
        return x1, x2, m1, m2

    def _flatten(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        return ad.reshape(x, (b, h * w, d))

    def _position_embeddings(self, od1: np.ndarray, od2: np.ndarray):
        """Per-sample embedding arrays (or parameter slices) for each field."""
        cfg = self.cfg
        mode = cfg.pe_mode
        if mode == "none":
            return None, None
        l = cfg.tokens_per_field
        side = cfg.encoder.feature_side
        d_t = cfg.cfa.d_t
        if mode == "learnable":
            return self.pe_table[:l, :], self.pe_table[l:, :]
        if mode == "regular":
            if self._pe_regular is None:
                self._pe_regular = regular_position_embedding(side, side, d_t)
            return self._pe_regular, self._pe_regular
        big = cfg.image_grid_side
        pe1 = np.empty((len(od1), l, d_t))
        pe2 = np.empty_like(pe1)
        for i in range(len(od1)):
            a, b = aligned_position_embeddings(
                RelCoord(float(od1[i, 0]), float(od1[i, 1])),
                RelCoord(float(od2[i, 0]), float(od2[i, 1])),
                big, big, side, side, d_t)
            pe1[i], pe2[i] = a, b
        return pe1, pe2

    def forward_batch(self, imgs1, imgs2, od1, od2, record: bool = False):
        """Logits for the configured strategy.

        Returns (logits, extras) where extras carries masks and any attention
        record; decision strategies return a (field1, field2) logits pair.
        """
        cfg = self.cfg
        if imgs1.shape != imgs2.shape:
            raise ShapeError(f"field batches disagree: {imgs1.shape} vs {imgs2.shape}")
        extras = {}
        if cfg.strategy == "crossfit":
            x1, x2, m1, m2 = self._encode_fields(imgs1, imgs2)
            extras["masks"] = (m1, m2)
            f1 = self.proj(self._flatten(x1))
            f2 = self.proj(self._flatten(x2))
            pe1, pe2 = self._position_embeddings(od1, od2)
            g1, g2, rec = self.stack(f1, f2, pe1, pe2, m1, m2, record=record)
            extras["attention"] = rec
            fused = ad.maximum(_masked_mean(g1, m1), _masked_mean(g2, m2))
            return self.head(fused), extras
        if cfg.strategy in _FEATURE_STRATEGIES:
            x1, x2, m1, m2 = self._encode_fields(imgs1, imgs2)
            extras["masks"] = (m1, m2)
            v1 = _masked_mean(self._flatten(x1), m1)
            v2 = _masked_mean(self._flatten(x2), m2)
            return self.head(fuse(v1, v2, cfg.strategy)), extras
        if cfg.strategy in _SINGLE_STRATEGIES:
            imgs = imgs1 if cfg.strategy == "single_field_1" else imgs2
            dt = ad.default_dtype()
            x = self.encoder(Tensor(np.moveaxis(imgs, 3, 1).astype(dt)))
            m = None
            if cfg.mask_enabled:
                m = masks_from_features(x.data, cfg.cfa.threshold)
            extras["masks"] = (m,)
            return self.head(_masked_mean(self._flatten(x), m)), extras
        # decision strategies: independent single-field logits, shared weights
        x1, x2, m1, m2 = self._encode_fields(imgs1, imgs2)
        extras["masks"] = (m1, m2)
        l1 = self.head(_masked_mean(self._flatten(x1), m1))
        l2 = self.head(_masked_mean(self._flatten(x2), m2))
        return (l1, l2), extras

    def loss_batch(self, imgs1, imgs2, od1, od2, labels) -> Tensor:
        out, _ = self.forward_batch(imgs1, imgs2, od1, od2)
        if isinstance(out, tuple):
            l1, l2 = out
            return ad.add(ad.cross_entropy_logits(l1, labels),
                          ad.cross_entropy_logits(l2, labels))
        return ad.cross_entropy_logits(out, labels)

    def predict_batch(self, imgs1, imgs2, od1, od2) -> list[Prediction]:
        with ad.no_grad():
            out, _ = self.forward_batch(imgs1, imgs2, od1, od2)
        if not isinstance(out, tuple):
            return [Prediction.from_logits(row) for row in out.data]
        l1, l2 = out[0].data, out[1].data
        preds = []
        for i in range(l1.shape[0]):
            preds.append(self._fuse_decision(l1[i], l2[i]))
        return preds

    def _fuse_decision(self, logits1: np.ndarray, logits2: np.ndarray) -> Prediction:
        p1, p2 = Prediction.from_logits(logits1), Prediction.from_logits(logits2)
        if self.cfg.strategy == "pred_max":
            # adopt the severer field's whole distribution
            return p1 if p1.grade >= p2.grade else p2
        avg = (p1.probabilities + p2.probabilities) / 2.0
        return Prediction(np.log(avg), avg, int(np.argmax(avg)))

    # -- single-pair conveniences (the public per-sample contracts) ---------

    def _as_batch(self, i1, i2, od1: RelCoord, od2: RelCoord):
        ods1 = np.array([[od1.x, od1.y]])
        ods2 = np.array([[od2.x, od2.y]])
        return i1[None], i2[None], ods1, ods2

    def forward_pair(self, i1, i2, od1: RelCoord, od2: RelCoord,
                     record: bool = False) -> Prediction:
        b1, b2, o1, o2 = self._as_batch(i1, i2, od1, od2)
        with ad.no_grad():
            out, extras = self.forward_batch(b1, b2, o1, o2, record=record)
        if isinstance(out, tuple):
            pred = self._fuse_decision(out[0].data[0], out[1].data[0])
        else:
            pred = Prediction.from_logits(out.data[0])
        return (pred, extras) if record else pred

    def loss_single_field(self, i1, i2, label: int, od1=None, od2=None) -> Tensor:
        """Both fields scored against the shared grade (pseudo-label sum)."""
        if self.cfg.strategy not in _DECISION_STRATEGIES + _SINGLE_STRATEGIES:
            raise ContractError(f"single-field loss undefined for {self.cfg.strategy!r}")
        od1 = od1 or RelCoord(0.5, 0.5)
        od2 = od2 or RelCoord(0.5, 0.5)
        b1, b2, o1, o2 = self._as_batch(i1, i2, od1, od2)
        x1, x2, m1, m2 = self._encode_fields(b1, b2)
        l1 = self.head(_masked_mean(self._flatten(x1), m1))
        l2 = self.head(_masked_mean(self._flatten(x2), m2))
        return ad.add(ad.cross_entropy_logits(l1, [label]),
                      ad.cross_entropy_logits(l2, [label]))
