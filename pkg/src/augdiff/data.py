"""Bag storage, splits, standardization and the synthetic corpus generator.

The synthetic generator stands in for WSI tiling plus CNN feature extraction:
instances come from class-conditional Gaussians in feature space, and the six
image augmentations are replaced by small orthogonal-affine-plus-noise maps
applied directly to the features.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import FormatError, InvalidArgument, MissingArtifact

BAG_MAGIC = b"AUGB"
BAG_VERSION = 1
MANIFEST_VERSION = 1
N_AUGMENTATIONS = 6
STD_FLOOR = 1e-6


@dataclass
class Bag:
    id: str
    label: int
    features: np.ndarray
    # generator bookkeeping; None for bags read from disk without a truth file
    instance_classes: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise InvalidArgument(f"bag {self.id!r}: features must be N x D, got {self.features.shape}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# -- bag files -------------------------------------------------------------------

def encode_bag(features: np.ndarray) -> bytes:
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise InvalidArgument(f"cannot store a bag of shape {x.shape}")
    header = BAG_MAGIC + struct.pack("<III", BAG_VERSION, x.shape[0], x.shape[1])
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_bag(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise OSError("truncated bag header")
    if raw[:4] != BAG_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != BAG_VERSION:
        raise FormatError(f"unsupported bag version {version}")
    if n == 0 or d == 0:
        raise FormatError("empty bag")
    need = 16 + 4 * n * d
    if len(raw) < need:
        raise OSError(f"truncated bag payload: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise FormatError("trailing bytes after bag payload")
    return np.frombuffer(raw, dtype="<f4", offset=16, count=n * d).reshape(n, d).copy()


def write_bag(path, features: np.ndarray):
    Path(path).write_bytes(encode_bag(features))


def read_bag(path) -> np.ndarray:
    """Features as float32 (N, D)."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"bag file not found: {p}")
    return decode_bag(p.read_bytes())


def read_bag_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(16)
    if len(raw) < 16:
        raise OSError(f"truncated bag header in {path}")
    if raw[:4] != BAG_MAGIC:
        raise FormatError(f"bad magic in {path}")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != BAG_VERSION:
        raise FormatError(f"unsupported bag version {version} in {path}")
    return n, d


# -- manifests -------------------------------------------------------------------

@dataclass
class BagRecord:
    id: str
    label: int
    file: str
    n: int


@dataclass
class BagManifest:
    dim: int
    bags: list[BagRecord]
    root: Path = field(default=Path("."), compare=False)
    version: int = MANIFEST_VERSION

    def to_json(self) -> dict:
        return {"version": self.version, "dim": self.dim, "bags": [asdict(b) for b in self.bags]}

    def record(self, bag_id: str) -> BagRecord:
        for b in self.bags:
            if b.id == bag_id:
                return b
        raise InvalidArgument(f"no bag {bag_id!r} in manifest")

    def load_bag(self, bag_id: str, truth: dict | None = None) -> Bag:
        rec = self.record(bag_id)
        feats = read_bag(self.root / rec.file)
        classes = None
        if truth and bag_id in truth:
            classes = np.asarray(truth[bag_id], dtype=np.int64)
        return Bag(rec.id, rec.label, feats, classes)

    def load_all(self, ids=None, truth: dict | None = None) -> list[Bag]:
        ids = [b.id for b in self.bags] if ids is None else ids
        return [self.load_bag(i, truth) for i in ids]


def write_manifest(path, manifest: BagManifest):
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def read_manifest(path, validate: bool = True) -> BagManifest:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"manifest not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {p} is not valid JSON: {exc}") from exc
    if set(raw) != {"version", "dim", "bags"}:
        raise FormatError(f"manifest keys must be version, dim, bags; got {sorted(raw)}")
    if raw["version"] != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {raw['version']}")
    records = []
    for b in raw["bags"]:
        if set(b) != {"id", "label", "file", "n"}:
            raise FormatError(f"bad bag record {b}")
        records.append(BagRecord(str(b["id"]), int(b["label"]), str(b["file"]), int(b["n"])))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate bag ids in manifest")
    m = BagManifest(int(raw["dim"]), records, root=p.parent)
    if validate:
        for r in records:
            f = m.root / r.file
            if not f.exists():
                raise MissingArtifact(f"bag file for {r.id!r} missing: {f}")
            n, d = read_bag_header(f)
            if n != r.n or d != m.dim:
                raise FormatError(f"bag {r.id!r}: file holds {n}x{d}, manifest says {r.n}x{m.dim}")
    return m


def save_bags(bags: list[Bag], outdir, subdir: str = "bags") -> BagManifest:
    """Write bag files plus manifest.json under ``outdir``; returns the manifest."""
    out = Path(outdir)
    (out / subdir).mkdir(parents=True, exist_ok=True)
    if not bags:
        raise InvalidArgument("no bags to save")
    dim = bags[0].dim
    records = []
    for bag in bags:
        if bag.dim != dim:
            raise InvalidArgument(f"bag {bag.id!r} has dim {bag.dim}, expected {dim}")
        rel = f"{subdir}/{bag.id}.bin"
        write_bag(out / rel, bag.features)
        records.append(BagRecord(bag.id, int(bag.label), rel, bag.n))
    manifest = BagManifest(dim, records, root=out)
    write_manifest(out / "manifest.json", manifest)
    return manifest


# -- standardization -----------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def standardizer_fit(features) -> Standardizer:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidArgument("standardizer needs at least 2 feature vectors")
    return Standardizer(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


# -- splits -------------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Either ``k`` stratified folds or fixed train/val/test fractions."""

    k: int | None = 4
    fractions: tuple[float, float, float] | None = None
    seed: int = 0


def make_splits(manifest: BagManifest, plan: SplitPlan) -> dict[str, list[str]]:
    by_label: dict[int, list[str]] = {}
    for rec in manifest.bags:
        by_label.setdefault(rec.label, []).append(rec.id)
    rng = np.random.default_rng(plan.seed)
    if plan.fractions is not None:
        fr = np.asarray(plan.fractions, dtype=float)
        if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
            raise InvalidArgument(f"split fractions must be three non-negatives summing to 1, got {plan.fractions}")
        out = {"train": [], "val": [], "test": []}
        for label in sorted(by_label):
            ids = [by_label[label][i] for i in rng.permutation(len(by_label[label]))]
            n_tr = int(round(fr[0] * len(ids)))
            n_va = int(round(fr[1] * len(ids)))
            out["train"] += ids[:n_tr]
            out["val"] += ids[n_tr:n_tr + n_va]
            out["test"] += ids[n_tr + n_va:]
        return out
    k = plan.k
    if k is None or k < 2:
        raise InvalidArgument(f"k-fold needs k >= 2, got {k}")
    folds: dict[str, list[str]] = {f"fold{i}": [] for i in range(k)}
    for label in sorted(by_label):
        ids = by_label[label]
        if len(ids) < k:
            raise InvalidArgument(f"label {label} has {len(ids)} bags, fewer than k={k}")
        for pos, i in enumerate(rng.permutation(len(ids))):
            folds[f"fold{pos % k}"].append(ids[i])
    return folds


# -- synthetic generator ---------------------------------------------------------------

@dataclass
class SyntheticSpec:
    dim: int = 512
    n_classes: int = 3             # instance classes; the last n_witness are witness classes
    n_witness: int = 1
    centroid_scale: float = 5.0
    within_std: float = 1.0
    latent_rank: int = 4
    latent_std: float = 1.5
    rotation_norm: float = 0.1
    bias_frac: float = 0.2
    noise_frac: float = 0.05
    bag_size_min: int = 60
    bag_size_max: int = 180
    witness_rate: float = 0.05
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    corpus_per_class: int = 2400
    seed: int = 0

    def validate(self):
        if self.dim < 1:
            raise InvalidArgument("dim must be positive")
        if self.n_classes < 2:
            raise InvalidArgument("need at least 2 instance classes")
        if not 1 <= self.n_witness < self.n_classes:
            raise InvalidArgument("n_witness must leave at least one background class")
        if not 0.0 < self.witness_rate <= 1.0:
            raise InvalidArgument(f"witness rate must be in (0, 1], got {self.witness_rate}")
        if not 1 <= self.bag_size_min <= self.bag_size_max:
            raise InvalidArgument("bad bag size range")
        if self.witness_rate * self.bag_size_min < 1.0:
            raise InvalidArgument(
                f"witness rate {self.witness_rate} x min bag size {self.bag_size_min} < 1: positive bags could hold no witness")
        if self.latent_rank < 0 or self.latent_rank > self.dim:
            raise InvalidArgument("latent rank out of range")
        if min(self.within_std, self.latent_std, self.centroid_scale) < 0:
            raise InvalidArgument("scales must be non-negative")


@dataclass
class AugTransform:
    rotation: np.ndarray   # orthogonal D x D
    bias: np.ndarray
    noise_std: np.ndarray  # per dimension

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return x @ self.rotation.T + self.bias + rng.standard_normal(x.shape) * self.noise_std


@dataclass
class FeatureWorld:
    """Ground truth of the synthetic feature space, drawn once per spec seed."""

    centroids: np.ndarray          # C x D
    loadings: np.ndarray           # C x D x r
    within_std: float
    transforms: list[AugTransform]

    def sample(self, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        classes = np.asarray(classes, dtype=np.int64)
        n, d = classes.shape[0], self.centroids.shape[1]
        r = self.loadings.shape[2]
        u = rng.standard_normal((n, r))
        x = self.centroids[classes] + np.einsum("ndr,nr->nd", self.loadings[classes], u)
        return x + self.within_std * rng.standard_normal((n, d))

    def nearest_centroid(self, x: np.ndarray) -> np.ndarray:
        d2 = ((np.asarray(x)[:, None, :] - self.centroids[None]) ** 2).sum(axis=-1)
        return d2.argmin(axis=1)


def random_rotation(dim: int, norm: float, rng: np.random.Generator) -> np.ndarray:
    """exp(S) for a random skew-symmetric S with spectral norm ``norm``."""
    a = rng.standard_normal((dim, dim))
    s = a - a.T
    spec = np.linalg.norm(s, 2)
    if spec == 0 or norm == 0:
        return np.eye(dim)
    return expm(s * (norm / spec))


def make_world(spec: SyntheticSpec) -> FeatureWorld:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xFEA7])
    d, c = spec.dim, spec.n_classes
    dirs = rng.standard_normal((c, d))
    centroids = spec.centroid_scale * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    loadings = np.zeros((c, d, spec.latent_rank))
    for k in range(c):
        if spec.latent_rank:
            q, _ = np.linalg.qr(rng.standard_normal((d, spec.latent_rank)))
            loadings[k] = spec.latent_std * q
    world = FeatureWorld(centroids, loadings, spec.within_std, [])
    # augmentation magnitudes are set relative to the original feature statistics
    probe = world.sample(np.repeat(np.arange(c), 500), rng)
    mean_norm = float(np.linalg.norm(probe, axis=1).mean())
    dim_std = probe.std(axis=0)
    for _ in range(N_AUGMENTATIONS):
        rot = random_rotation(d, spec.rotation_norm, rng)
        b = rng.standard_normal(d)
        b *= spec.bias_frac * mean_norm / np.linalg.norm(b)
        world.transforms.append(AugTransform(rot, b, spec.noise_frac * dim_std))
    return world


@dataclass
class InstanceCorpus:
    features: np.ndarray     # M x D
    classes: np.ndarray      # instance class per row
    conditions: np.ndarray   # 0 = original, 1..6 = augmentation family

    def __len__(self):
        return self.features.shape[0]


def gen_instance_corpus(spec: SyntheticSpec, rng: np.random.Generator, n_per_class: int | None = None,
                        world: FeatureWorld | None = None) -> InstanceCorpus:
    """Originals (condition 0) plus one augmented copy per family (conditions 1..6)."""
    world = world or make_world(spec)
    n = spec.corpus_per_class if n_per_class is None else n_per_class
    if n < 1:
        raise InvalidArgument("n_per_class must be positive")
    classes = np.repeat(np.arange(spec.n_classes), n)
    orig = world.sample(classes, rng)
    feats, cls, cond = [orig], [classes], [np.zeros(len(classes), dtype=np.int64)]
    for j, tr in enumerate(world.transforms, start=1):
        feats.append(tr.apply(orig, rng))
        cls.append(classes)
        cond.append(np.full(len(classes), j, dtype=np.int64))
    return InstanceCorpus(np.concatenate(feats), np.concatenate(cls), np.concatenate(cond))


@dataclass
class MilTask:
    bags: list[Bag]
    splits: dict[str, list[str]]
    world: FeatureWorld

    def split(self, name: str) -> list[Bag]:
        index = {b.id: b for b in self.bags}
        return [index[i] for i in self.splits[name]]


def gen_mil_task(spec: SyntheticSpec, rng: np.random.Generator, world: FeatureWorld | None = None) -> MilTask:
    """Bags with a witness-rate fraction of witness instances; label 0 means no witness.

    With several witness classes, a positive bag holds exactly one witness class
    and its label is 1 + that class's witness index.
    """
    world = world or make_world(spec)
    n_bg = spec.n_classes - spec.n_witness
    n_labels = spec.n_witness + 1
    bags = []
    splits: dict[str, list[str]] = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        # balanced labels, shuffled
        labels = np.arange(count) % n_labels
        labels = labels[rng.permutation(count)]
        ids = []
        for i, label in enumerate(labels):
            n = int(rng.integers(spec.bag_size_min, spec.bag_size_max + 1))
            classes = rng.integers(0, n_bg, size=n)
            if label > 0:
                n_wit = int(round(spec.witness_rate * n))
                n_wit = min(max(n_wit, 1), n)
                pos = rng.choice(n, size=n_wit, replace=False)
                classes[pos] = n_bg + label - 1
            bag_id = f"{split}_{i:04d}"
            bags.append(Bag(bag_id, int(label), world.sample(classes, rng), classes))
            ids.append(bag_id)
        splits[split] = ids
    return MilTask(bags, splits, world)


def write_task(task: MilTask, outdir) -> BagManifest:
    """manifest.json + bag files + splits.json + truth.json (instance classes)."""
    out = Path(outdir)
    manifest = save_bags(task.bags, out)
    (out / "splits.json").write_text(json.dumps(task.splits, indent=1) + "\n")
    truth = {b.id: b.instance_classes.tolist() for b in task.bags if b.instance_classes is not None}
    (out / "truth.json").write_text(json.dumps(truth) + "\n")
    return manifest


def write_corpus(corpus: InstanceCorpus, outdir) -> Path:
    """One bag file per condition plus corpus.json listing classes per row."""
    out = Path(outdir)
    (out / "corpus").mkdir(parents=True, exist_ok=True)
    parts = []
    for j in sorted(set(corpus.conditions.tolist())):
        rows = corpus.conditions == j
        rel = f"corpus/cond{j}.bin"
        write_bag(out / rel, corpus.features[rows])
        parts.append({"condition": int(j), "file": rel, "n": int(rows.sum()),
                      "classes": corpus.classes[rows].tolist()})
    path = out / "corpus.json"
    path.write_text(json.dumps({"version": 1, "dim": int(corpus.features.shape[1]), "parts": parts}) + "\n")
    return path


def read_corpus(path) -> InstanceCorpus:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"corpus not found: {p}")
    raw = json.loads(p.read_text())
    feats, cls, cond = [], [], []
    for part in raw["parts"]:
        x = read_bag(p.parent / part["file"])
        if x.shape != (part["n"], raw["dim"]):
            raise FormatError(f"corpus part {part['file']} has shape {x.shape}")
        feats.append(x)
        cls.append(np.asarray(part["classes"], dtype=np.int64))
        cond.append(np.full(part["n"], part["condition"], dtype=np.int64))
    return InstanceCorpus(np.concatenate(feats).astype(np.float64), np.concatenate(cls), np.concatenate(cond))


def read_truth(root) -> dict | None:
    p = Path(root) / "truth.json"
    if not p.exists():
        return None
    return json.loads(p.read_text())


def read_splits(root) -> dict[str, list[str]]:
    p = Path(root) / "splits.json"
    if not p.exists():
        raise MissingArtifact(f"splits not found: {p}")
    return json.loads(p.read_text())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

