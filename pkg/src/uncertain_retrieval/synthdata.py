"""Synthetic multi-grained triplets.

Each item belongs to a concept and carries one value per attribute slot. Its
image vector is ``prototype[concept] + sum_j attribute_embedding[j, value_j]``
plus Gaussian noise. A query text is a per-slot block vector encoding the
attribute change from source to target. Fine texts describe every slot, so
exactly one item matches; coarse texts zero some slots, which leaves ``k``
items of the source concept equally valid.
"""
import itertools
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

FORMAT_MAGIC = b"UQRDATA/1\n"
FORMAT_VERSION = 1

FINE = 0
COARSE = 1
GRANULARITY_NAMES = {FINE: "fine", COARSE: "coarse"}


class SpecError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SynthSpec:
    n_concepts: int = 20
    n_attributes: int = 2
    items_per_concept: int = 16
    coarse_fraction: float = 0.5
    coarse_multiplicity: int = 4
    noise_level: float = 0.5
    prototype_scale: float = 0.3
    attribute_scale: float = 1.0
    d_in: int = 32
    t_in: int = 16
    n_train: int = 2000
    n_eval: int = 500
    eval_item_fraction: float = 0.25
    seed: int = 0

    @classmethod
    def from_dict(cls, raw):
        known = {f.name: f for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise SpecError(key, "unknown field")
        kwargs = {}
        for key, value in raw.items():
            want = int if known[key].type in (int, "int") else float
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SpecError(key, f"expected a number, got {value!r}")
            if want is int and float(value) != int(value):
                raise SpecError(key, f"expected an integer, got {value!r}")
            kwargs[key] = want(value)
        spec = cls(**kwargs)
        spec.validate()
        return spec

    def to_dict(self):
        return asdict(self)

    @property
    def values_per_attribute(self):
        v = int(round(self.items_per_concept ** (1.0 / self.n_attributes)))
        for cand in (v - 1, v, v + 1):
            if cand >= 1 and cand**self.n_attributes == self.items_per_concept:
                return cand
        return None

    @property
    def withheld_attributes(self):
        v = self.values_per_attribute
        for w in range(1, self.n_attributes + 1):
            if v**w == self.coarse_multiplicity:
                return w
        return None

    @property
    def n_items(self):
        return self.n_concepts * self.items_per_concept

    def validate(self):
        positive = ("n_concepts", "n_attributes", "items_per_concept", "d_in", "t_in")
        for name in positive:
            if getattr(self, name) < 1:
                raise SpecError(name, "must be >= 1")
        for name in ("n_train", "n_eval"):
            if getattr(self, name) < 0:
                raise SpecError(name, "must be >= 0")
        if not 0.0 <= self.coarse_fraction <= 1.0:
            raise SpecError("coarse_fraction", "must lie in [0, 1]")
        if not 0.0 < self.eval_item_fraction < 1.0:
            raise SpecError("eval_item_fraction", "must lie in (0, 1)")
        for name in ("noise_level", "prototype_scale", "attribute_scale"):
            if getattr(self, name) < 0:
                raise SpecError(name, "must be nonnegative")
        if self.coarse_multiplicity < 2:
            raise SpecError("coarse_multiplicity", "must be >= 2")
        if self.values_per_attribute is None or self.values_per_attribute < 2:
            raise SpecError(
                "items_per_concept",
                f"{self.items_per_concept} is not v**{self.n_attributes} for an integer v >= 2",
            )
        if self.t_in % self.n_attributes:
            raise SpecError("t_in", f"must be divisible by n_attributes={self.n_attributes}")
        if self.coarse_multiplicity > self.items_per_concept or self.withheld_attributes is None:
            raise SpecError(
                "coarse_multiplicity",
                f"multiplicity unsatisfiable: {self.coarse_multiplicity} is not a power of "
                f"{self.values_per_attribute} up to {self.items_per_concept} items per concept",
            )
        n_eval_items = int(round(self.items_per_concept * self.eval_item_fraction))
        if not 1 <= n_eval_items < self.items_per_concept - 1:
            raise SpecError("eval_item_fraction", "leaves no held-out or too few training items per concept")


@dataclass(frozen=True)
class Triplet:
    source_id: int
    source_vec: np.ndarray
    text_vec: np.ndarray
    target_id: int
    granularity: int
    valid_targets: frozenset

    @property
    def is_coarse(self):
        return self.granularity == COARSE


@dataclass
class TripletSet:
    """Column-wise storage; ``valid`` rows are padded with -1."""

    source_ids: np.ndarray
    texts: np.ndarray
    target_ids: np.ndarray
    granularity: np.ndarray
    valid: np.ndarray
    kept: np.ndarray

    def __len__(self):
        return int(self.target_ids.shape[0])

    def subset(self, index):
        index = np.asarray(index)
        return TripletSet(
            self.source_ids[index],
            self.texts[index],
            self.target_ids[index],
            self.granularity[index],
            self.valid[index],
            self.kept[index],
        )

    def valid_set(self, i):
        row = self.valid[i]
        return frozenset(int(t) for t in row[row >= 0])

    def triplet(self, i, items):
        return Triplet(
            source_id=int(self.source_ids[i]),
            source_vec=items[self.source_ids[i]],
            text_vec=self.texts[i],
            target_id=int(self.target_ids[i]),
            granularity=int(self.granularity[i]),
            valid_targets=self.valid_set(i),
        )


@dataclass
class Dataset:
    spec: SynthSpec
    items: np.ndarray
    item_concept: np.ndarray
    item_attrs: np.ndarray
    eval_items: np.ndarray
    prototypes: np.ndarray
    attribute_embeddings: np.ndarray
    text_codes: np.ndarray
    slot_markers: np.ndarray
    train: TripletSet
    queries: TripletSet

    @property
    def gallery(self):
        return self.items

    @property
    def gallery_ids(self):
        return np.arange(self.items.shape[0])

    def train_triplets(self):
        return [self.train.triplet(i, self.items) for i in range(len(self.train))]

    def eval_triplets(self):
        return [self.queries.triplet(i, self.items) for i in range(len(self.queries))]


def _text_block(codes, markers, src_attrs, tgt_attrs, kept):
    # the marker keeps "slot unchanged" distinct from "slot withheld"
    blocks = [
        markers[j] + codes[j, tgt_attrs[j]] - codes[j, src_attrs[j]] if kept[j] else np.zeros(codes.shape[2])
        for j in range(codes.shape[0])
    ]
    return np.concatenate(blocks)


def _draw_triplets(n, spec, rng, pool_by_concept, source_by_concept, item_attrs, item_concept, codes, markers):
    m = spec.n_attributes
    w = spec.withheld_attributes
    width = spec.coarse_multiplicity
    source_ids = np.empty(n, dtype=np.int64)
    target_ids = np.empty(n, dtype=np.int64)
    granularity = np.empty(n, dtype=np.int64)
    texts = np.empty((n, spec.t_in))
    valid = np.full((n, width), -1, dtype=np.int64)
    kept = np.ones((n, m), dtype=bool)
    for i in range(n):
        coarse = rng.random() < spec.coarse_fraction
        c = int(rng.integers(spec.n_concepts))
        src = int(rng.choice(source_by_concept[c]))
        choices = pool_by_concept[c][pool_by_concept[c] != src]
        tgt = int(rng.choice(choices))
        keep = np.ones(m, dtype=bool)
        if coarse:
            keep[rng.choice(m, size=w, replace=False)] = False
            same = (item_concept == c) & np.all(item_attrs[:, keep] == item_attrs[tgt, keep], axis=1)
            members = np.flatnonzero(same)
        else:
            members = np.array([tgt])
        source_ids[i] = src
        target_ids[i] = tgt
        granularity[i] = COARSE if coarse else FINE
        texts[i] = _text_block(codes, markers, item_attrs[src], item_attrs[tgt], keep)
        valid[i, : members.size] = members
        kept[i] = keep
    return TripletSet(source_ids, texts, target_ids, granularity, valid, kept)


def generate(spec=None):
    spec = SynthSpec() if spec is None else spec
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    v = spec.values_per_attribute
    m = spec.n_attributes
    block = spec.t_in // m

    prototypes = spec.prototype_scale * rng.standard_normal((spec.n_concepts, spec.d_in))
    attribute_embeddings = spec.attribute_scale * rng.standard_normal((m, v, spec.d_in))
    text_codes = rng.standard_normal((m, v, block))
    slot_markers = rng.standard_normal((m, block))

    combos = np.array(list(itertools.product(range(v), repeat=m)), dtype=np.int64)
    item_concept = np.repeat(np.arange(spec.n_concepts), spec.items_per_concept)
    item_attrs = np.tile(combos, (spec.n_concepts, 1))
    items = prototypes[item_concept] + attribute_embeddings[np.arange(m), item_attrs].sum(axis=1)
    items = items + spec.noise_level * rng.standard_normal(items.shape)

    n_eval_items = int(round(spec.items_per_concept * spec.eval_item_fraction))
    eval_items = np.zeros(spec.n_items, dtype=bool)
    for c in range(spec.n_concepts):
        members = np.arange(c * spec.items_per_concept, (c + 1) * spec.items_per_concept)
        eval_items[rng.choice(members, size=n_eval_items, replace=False)] = True

    train_by_concept = [np.flatnonzero((item_concept == c) & ~eval_items) for c in range(spec.n_concepts)]
    eval_by_concept = [np.flatnonzero((item_concept == c) & eval_items) for c in range(spec.n_concepts)]

    train = _draw_triplets(
        spec.n_train, spec, rng, train_by_concept, train_by_concept, item_attrs, item_concept, text_codes, slot_markers
    )
    queries = _draw_triplets(
        spec.n_eval, spec, rng, eval_by_concept, train_by_concept, item_attrs, item_concept, text_codes, slot_markers
    )
    return Dataset(
        spec=spec,
        items=items,
        item_concept=item_concept,
        item_attrs=item_attrs,
        eval_items=eval_items,
        prototypes=prototypes,
        attribute_embeddings=attribute_embeddings,
        text_codes=text_codes,
        slot_markers=slot_markers,
        train=train,
        queries=queries,
    )


def coarse_split(queries):
    """Partition a TripletSet (or a list of Triplets) into (coarse_only, fine_only)."""
    if isinstance(queries, TripletSet):
        coarse = queries.granularity == COARSE
        return queries.subset(np.flatnonzero(coarse)), queries.subset(np.flatnonzero(~coarse))
    coarse_only = [q for q in queries if q.granularity == COARSE]
    fine_only = [q for q in queries if q.granularity != COARSE]
    return coarse_only, fine_only


# serialization --------------------------------------------------------------

_ARRAYS = (
    "items",
    "item_concept",
    "item_attrs",
    "eval_items",
    "prototypes",
    "attribute_embeddings",
    "text_codes",
    "slot_markers",
)
_TRIPLET_ARRAYS = ("source_ids", "texts", "target_ids", "granularity", "valid", "kept")


def _dtype_code(arr):
    if arr.dtype == np.bool_:
        return "|b1"
    if np.issubdtype(arr.dtype, np.integer):
        return "<i8"
    return "<f8"


def _collect(ds):
    out = [(name, getattr(ds, name)) for name in _ARRAYS]
    for split in ("train", "queries"):
        ts = getattr(ds, split)
        out += [(f"{split}.{name}", getattr(ts, name)) for name in _TRIPLET_ARRAYS]
    return out


def save_dataset(ds, path):
    """Write a single-file dataset: magic line, JSON header line, raw little-endian arrays."""
    arrays = [(name, np.ascontiguousarray(a, dtype=_dtype_code(a))) for name, a in _collect(ds)]
    header = {
        "format_version": FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(a.tobytes(order="C"))


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != FORMAT_MAGIC:
            raise ValueError(f"{path}: not a dataset file (bad magic {magic[:16]!r})")
        header = json.loads(fh.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
        loaded = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            loaded[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    splits = {
        split: TripletSet(*(loaded[f"{split}.{name}"] for name in _TRIPLET_ARRAYS))
        for split in ("train", "queries")
    }
    return Dataset(
        spec=SynthSpec.from_dict(header["spec"]),
        **{name: loaded[name] for name in _ARRAYS},
        **splits,
    )
