"""MIL aggregators (AMIL, LossAttn, DSMIL), baseline augmenters and the
online-augmentation training loop.

Forward passes are written once against :class:`~augdiff.numkit.Tape`; the
same code runs recorded for training and unrecorded for prediction.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augmentor import AugmentConfig, augment_bag
from .checkpoint import pack, read_tensors, unpack
from .data import Bag
from .diffusion import DenoiserParams
from .errors import FormatError, InvalidArgument, MissingArtifact, NumericFailure, UndefinedMetric
from .metrics import macro_auc, micro_accuracy
from .numkit import LOG_CLAMP, AdamState, Tape, Tensor, adam_step, backward

log = logging.getLogger(__name__)

VARIANTS = ("amil", "lossattn", "dsmil")
POLICIES = ("none", "augdiff", "mixup", "pseudobag", "offline")
MIL_MAGIC = b"AUGM"
MIL_VERSION = 1


@dataclass
class MilParams:
    variant: str
    dim: int
    n_classes: int
    hidden: int = 128
    temperature: float = 1.0
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MilParams":
        out = copy.copy(self)
        out.weights = {k: v.copy() for k, v in self.weights.items()}
        return out


def _glorot(rng, fan_out, fan_in):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_mil(variant: str, dim: int, n_classes: int, hidden: int = 128, temperature: float = 1.0,
             seed: int = 0) -> MilParams:
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown MIL variant {variant!r}")
    if n_classes < 2:
        raise InvalidArgument("need at least 2 classes")
    if temperature <= 0:
        raise InvalidArgument("temperature must be positive")
    rng = np.random.default_rng([seed, 0x4D1])
    H, D, C = hidden, dim, n_classes
    if variant == "amil":
        w = {"V": _glorot(rng, H, D), "U": _glorot(rng, H, D), "w": _glorot(rng, 1, H),
             "cls.w": _glorot(rng, C, D), "cls.b": np.zeros(C)}
    elif variant == "lossattn":
        w = {"cls.w": _glorot(rng, C, D), "cls.b": np.zeros(C)}
    else:
        w = {"inst.w": _glorot(rng, C, D), "inst.b": np.zeros(C),
             "q.w": _glorot(rng, H, D), "v.w": _glorot(rng, H, D),
             "bag.w": _glorot(rng, C, H), "bag.b": np.zeros(C)}
    return MilParams(variant, dim, n_classes, hidden, temperature, w)


# -- forward passes --------------------------------------------------------------------

def _amil(tape: Tape, P, x: Tensor, params: MilParams):
    gate = tape.mul(tape.tanh(tape.linear(x, P["V"])), tape.sigmoid(tape.linear(x, P["U"])))
    scores = tape.transpose(tape.linear(gate, P["w"]))        # 1 x N
    a = tape.softmax(scores)
    bag = tape.matmul(a, x)                                     # 1 x D
    p = tape.softmax(tape.reshape(tape.linear(bag, P["cls.w"], P["cls.b"]), (params.n_classes,)))
    return p, a.data[0]


def _lossattn(tape: Tape, P, x: Tensor, params: MilParams):
    s = tape.linear(x, P["cls.w"], P["cls.b"])                  # N x C
    conf = tape.scale(tape.rowmax(s), 1.0 / params.temperature)
    a = tape.softmax(tape.reshape(conf, (1, x.shape[0])))
    p = tape.softmax(tape.reshape(tape.matmul(a, s), (params.n_classes,)))
    return p, a.data[0]


def _dsmil(tape: Tape, P, x: Tensor, params: MilParams):
    s = tape.linear(x, P["inst.w"], P["inst.b"])                # N x C
    critical = s.data.argmax(axis=0)                            # lowest index wins ties
    q = tape.linear(x, P["q.w"])
    v = tape.linear(x, P["v.w"])
    sim = tape.matmul(tape.gather_rows(q, critical), tape.transpose(q))   # C x N
    a = tape.softmax(sim)
    bag_feat = tape.matmul(a, v)                                # C x H
    bag_logits = tape.add(tape.sum(tape.mul(bag_feat, P["bag.w"]), axis=1), P["bag.b"])
    inst_logits = tape.rowmax(tape.transpose(s))
    p = tape.softmax(tape.scale(tape.add(bag_logits, inst_logits), 0.5))
    return p, a.data


_FORWARD = {"amil": _amil, "lossattn": _lossattn, "dsmil": _dsmil}


def mil_forward(tape: Tape, params: MilParams, features) -> tuple[Tensor, dict[str, Tensor], np.ndarray]:
    """(class probabilities, parameter tensors, attention) for one bag."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgument("MIL forward needs a non-empty N x D bag")
    if x.shape[1] != params.dim:
        raise InvalidArgument(f"bag dim {x.shape[1]} does not match model dim {params.dim}")
    P = {k: tape.param(v, k) for k, v in params.weights.items()}
    p, a = _FORWARD[params.variant](tape, P, tape.const(x), params)
    return p, P, a


def forward(params: MilParams, features) -> tuple[np.ndarray, np.ndarray]:
    """(p, a) with a of shape (N,) for AMIL/LossAttn and (C, N) for DSMIL."""
    p, _, a = mil_forward(Tape(record=False), params, features)
    return p.data, a


def amil_forward(params: MilParams, bag):
    return forward(params, getattr(bag, "features", bag))


def lossattn_forward(params: MilParams, bag):
    return forward(params, getattr(bag, "features", bag))


def dsmil_forward(params: MilParams, bag):
    return forward(params, getattr(bag, "features", bag))


def mil_loss(p, label: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise InvalidArgument(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], LOG_CLAMP)))


def loss_and_grads(params: MilParams, features, label: int) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    p, _, _ = mil_forward(tape, params, features)
    loss = tape.nll(p, [label])
    return float(loss.data), backward(tape, loss)


def predict(params: MilParams, bag) -> tuple[int, np.ndarray]:
    """Argmax class (lowest index on ties) and the probability vector. Bags are never augmented here."""
    p, _ = forward(params, getattr(bag, "features", bag))
    return int(np.argmax(p)), p


# -- baseline augmenters -----------------------------------------------------------------

def mixup_augment(bag: Bag, alpha: float, rng: np.random.Generator, lam=None) -> tuple[Bag, bool]:
    """Mix each instance with a random other instance of the same bag.

    Returns (bag, warned); bags with fewer than 2 instances come back unchanged
    with ``warned`` set. ``lam`` pins the mixing weight (scalar or per instance).
    """
    if alpha <= 0:
        raise InvalidArgument("mixup alpha must be positive")
    n = bag.n
    if n < 2:
        log.warning("mixup skipped for bag %s with %d instance(s)", bag.id, n)
        return bag, True
    x = np.asarray(bag.features, dtype=np.float64)
    lam = rng.beta(alpha, alpha, size=n) if lam is None else np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    partner = (np.arange(n) + rng.integers(1, n, size=n)) % n
    mixed = lam[:, None] * x + (1.0 - lam[:, None]) * x[partner]
    return Bag(bag.id, bag.label, mixed, bag.instance_classes), False


def pseudobag_split(bag: Bag, m: int, rng: np.random.Generator) -> list[Bag]:
    """Random partition into ``m`` sub-bags whose sizes differ by at most one."""
    if not 1 <= m <= bag.n:
        raise InvalidArgument(f"cannot split a bag of {bag.n} instances into {m} pseudo-bags")
    order = rng.permutation(bag.n)
    out = []
    for k, idx in enumerate(np.array_split(order, m)):
        classes = None if bag.instance_classes is None else bag.instance_classes[idx]
        out.append(Bag(f"{bag.id}#p{k}", bag.label, bag.features[idx], classes))
    return out


# -- training -----------------------------------------------------------------------------

@dataclass
class MilTrainConfig:
    variant: str = "amil"
    policy: str = "none"
    lr: float = 1e-4
    max_epochs: int = 200
    patience: int = 10
    metric: str = "macro_auc"
    seed: int = 0
    hidden: int = 128
    temperature: float = 1.0
    mixup_alpha: float = 1.0
    pseudo_bags: int = 4
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown MIL variant {self.variant!r}")
        if self.policy not in POLICIES:
            raise InvalidArgument(f"unknown augmentation policy {self.policy!r}")
        if self.patience < 1:
            raise InvalidArgument("patience must be >= 1")
        if self.max_epochs < 1:
            raise InvalidArgument("max_epochs must be >= 1")
        if self.metric not in ("macro_auc", "micro_acc", "neg_loss"):
            raise InvalidArgument(f"unknown validation metric {self.metric!r}")
        if self.policy == "mixup" and self.mixup_alpha <= 0:
            raise InvalidArgument("mixup alpha must be positive")
        if self.policy == "pseudobag" and self.pseudo_bags < 1:
            raise InvalidArgument("pseudo_bags must be >= 1")
        if self.policy == "augdiff":
            self.augment.validate()


@dataclass
class MilHistory:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0

    def to_json(self) -> dict:
        return {"train_loss": self.train_loss, "val_metric": self.val_metric, "val_loss": self.val_loss,
                "best_epoch": self.best_epoch, "epochs_run": self.epochs_run}


def bag_probs(params: MilParams, bags: list[Bag]) -> np.ndarray:
    return np.stack([predict(params, b)[1] for b in bags])


def validation_score(params: MilParams, bags: list[Bag], metric: str) -> tuple[float, float]:
    """(score to maximize, mean loss) on un-augmented bags."""
    probs = bag_probs(params, bags)
    labels = np.array([b.label for b in bags])
    loss = float(np.mean([mil_loss(p, y) for p, y in zip(probs, labels)]))
    if metric == "micro_acc":
        return micro_accuracy(probs.argmax(axis=1), labels), loss
    if metric == "macro_auc":
        try:
            return macro_auc(probs, labels)[0], loss
        except UndefinedMetric:
            log.warning("validation AUC undefined; falling back to negative loss")
    return -loss, loss


def _epoch_bags(bags, cfg: MilTrainConfig, epoch: int, rng: np.random.Generator, dae, dae_hash: str) -> list[Bag]:
    order = rng.permutation(len(bags))
    if cfg.policy == "pseudobag":
        expanded = [pb for i in order for pb in pseudobag_split(bags[i], min(cfg.pseudo_bags, bags[i].n), rng)]
        return [expanded[i] for i in rng.permutation(len(expanded))]
    out = []
    for i in order:
        bag = bags[i]
        if cfg.policy == "augdiff":
            bag = augment_bag(bag, dae, cfg.augment, epoch=epoch, checkpoint_hash=dae_hash).as_bag()
        elif cfg.policy == "mixup":
            bag, _ = mixup_augment(bag, cfg.mixup_alpha, rng)
        out.append(bag)
    return out


def train_mil(train_bags: list[Bag], val_bags: list[Bag], cfg: MilTrainConfig, dae: DenoiserParams | None = None,
              n_classes: int | None = None, dae_hash: str = "", metric_fn=None) -> tuple[MilParams, MilHistory]:
    """Train with fresh per-epoch augmentation and early stopping on the validation metric.

    Returns the parameters from the best validation epoch. ``metric_fn(params, val_bags)``
    overrides the configured metric.
    """
    cfg.validate()
    if not train_bags or not val_bags:
        raise InvalidArgument("need non-empty train and validation sets")
    overlap = {b.id for b in train_bags} & {b.id for b in val_bags}
    if overlap:
        raise InvalidArgument(f"train and validation share bags: {sorted(overlap)[:3]}")
    dim = train_bags[0].dim
    if any(b.dim != dim for b in train_bags + val_bags):
        raise InvalidArgument("bags differ in feature dimension")
    if cfg.policy == "augdiff":
        if dae is None:
            raise InvalidArgument("policy augdiff needs a trained DAE")
        if dae.dim != dim:
            raise InvalidArgument(f"DAE dim {dae.dim} does not match bag dim {dim}")
        cfg.augment.validate(dae)
    labels = [b.label for b in train_bags + val_bags]
    C = n_classes or max(2, max(labels) + 1)
    params = init_mil(cfg.variant, dim, C, cfg.hidden, cfg.temperature, cfg.seed)
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x3111])
    hist = MilHistory()
    best, best_score = params.copy(), -np.inf
    for epoch in range(cfg.max_epochs):
        losses = []
        for bag in _epoch_bags(train_bags, cfg, epoch, rng, dae, dae_hash):
            loss, grads = loss_and_grads(params, bag.features, bag.label)
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite MIL loss at epoch {epoch}", {"epoch": epoch, "bag": bag.id})
            adam_step(opt, params.weights, grads)
            losses.append(loss)
        hist.train_loss.append(float(np.mean(losses)))
        score, vloss = validation_score(params, val_bags, cfg.metric)
        if metric_fn is not None:
            score = float(metric_fn(params, val_bags))
        hist.val_metric.append(score)
        hist.val_loss.append(vloss)
        hist.epochs_run = epoch + 1
        if score > best_score:
            best_score, best, hist.best_epoch = score, params.copy(), epoch
        elif epoch - hist.best_epoch >= cfg.patience:
            break
    log.info("%s/%s stopped after %d epochs, best epoch %d (val %.4f)", cfg.variant, cfg.policy,
             hist.epochs_run, hist.best_epoch, best_score)
    return best, hist


# -- checkpoint ---------------------------------------------------------------------------

def encode_mil(params: MilParams) -> bytes:
    header = {"variant": params.variant, "D": params.dim, "C": params.n_classes, "H": params.hidden,
              "temperature": params.temperature,
              "tensors": [[k, list(v.shape)] for k, v in params.weights.items()]}
    return pack(MIL_MAGIC, MIL_VERSION, header, list(params.weights.values()))


def decode_mil(raw: bytes) -> MilParams:
    h, payload = unpack(raw, MIL_MAGIC, MIL_VERSION)
    if h.get("variant") not in VARIANTS:
        raise FormatError(f"unknown MIL variant in checkpoint: {h.get('variant')!r}")
    return MilParams(h["variant"], h["D"], h["C"], h["H"], h["temperature"], read_tensors(payload, h["tensors"]))


def save_mil(path, params: MilParams) -> str:
    raw = encode_mil(params)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_mil(path) -> tuple[MilParams, str]:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"MIL checkpoint not found: {p}")
    raw = p.read_bytes()
    return decode_mil(raw), hashlib.sha256(raw).hexdigest()
