"""Synthetic datasets, client partitioning and heterogeneity measurement."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "ClientPartition",
    "PartitionSpec",
    "PartitionList",
    "HeterogeneityReport",
    "PartitionError",
    "generate_blobs",
    "partition",
    "partition_iid",
    "partition_dirichlet",
    "partition_shard",
    "partition_hdir",
    "mirror_partition",
    "largest_remainder",
    "js_divergence",
    "heterogeneity_report",
    "write_mapping",
    "read_mapping",
    "write_report",
    "read_report",
]

LN2 = math.log(2.0)
MAX_RESAMPLES = 100


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    attribute_sizes: dict[str, int] = field(default_factory=dict)
    domain_id: np.ndarray | None = None
    split: str = "train"
    domain_shifts: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be an (n_samples, n_features) matrix matching labels")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")
        for name, col in self.attributes.items():
            if len(col) != n:
                raise ValueError(f"attribute {name!r} has wrong length")
        if self.domain_id is not None and len(self.domain_id) != n:
            raise ValueError("domain_id has wrong length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            n_classes=self.n_classes,
            attributes={k: v[idx] for k, v in self.attributes.items()},
            attribute_sizes=dict(self.attribute_sizes),
            domain_id=None if self.domain_id is None else self.domain_id[idx],
            split=self.split,
            domain_shifts=self.domain_shifts,
        )

    def with_labels(self, labels) -> "Dataset":
        return Dataset(
            features=self.features,
            labels=np.asarray(labels, dtype=np.int64),
            n_classes=self.n_classes,
            attributes=self.attributes,
            attribute_sizes=self.attribute_sizes,
            domain_id=self.domain_id,
            split=self.split,
            domain_shifts=self.domain_shifts,
        )

    def column(self, key: str) -> tuple[np.ndarray, int]:
        """Categorical column ``key`` ('label' or an attribute name) and its category count."""
        if key == "label":
            return self.labels, self.n_classes
        if key not in self.attributes:
            raise KeyError(f"dataset has no attribute {key!r}")
        return self.attributes[key], self.attribute_sizes[key]


ATTRIBUTE_SIZES = {"a0": 4, "a1": 3, "a2": 3}


def generate_blobs(
    n_classes: int,
    n_per_class: int,
    n_features: int,
    n_domains: int,
    seed: int,
    *,
    n_test_per_class: int | None = None,
    class_sep: float = 3.0,
    noise: float = 1.0,
    domain_shift: float = 2.0,
) -> tuple[Dataset, Dataset]:
    """Gaussian class blobs with optional domain shifts and three categorical attributes.

    Class ``c`` is centred at a random mean drawn with scale ``class_sep``.
    Domain ``d`` translates every feature row by a fixed vector (zero for
    domain 0), which is stored in ``domain_shifts``.  Within each class,
    sample ``j`` belongs to domain ``j % n_domains`` so domains stay class
    balanced.  Attributes ``a0``-``a2`` are drawn from fixed skewed priors.
    """
    if min(n_classes, n_per_class, n_features, n_domains) < 1:
        raise ValueError("all counts must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(n_classes, n_features))
    shifts = rng.normal(0.0, domain_shift, size=(n_domains, n_features))
    shifts[0] = 0.0
    priors = {}
    for name, k in ATTRIBUTE_SIZES.items():
        w = 1.0 / np.arange(1, k + 1)
        priors[name] = w / w.sum()

    def draw(per_class: int, split: str) -> Dataset:
        labels = np.repeat(np.arange(n_classes), per_class)
        domain = np.tile(np.arange(per_class) % n_domains, n_classes)
        x = means[labels] + noise * rng.normal(size=(len(labels), n_features)) + shifts[domain]
        attrs = {
            name: rng.choice(len(p), size=len(labels), p=p).astype(np.int64) for name, p in priors.items()
        }
        return Dataset(
            features=x,
            labels=labels.astype(np.int64),
            n_classes=n_classes,
            attributes=attrs,
            attribute_sizes=dict(ATTRIBUTE_SIZES),
            domain_id=domain.astype(np.int64),
            split=split,
            domain_shifts=shifts.copy(),
        )

    train = draw(n_per_class, "train")
    test = draw(n_test_per_class if n_test_per_class is not None else n_per_class, "test")
    return train, test


# --------------------------------------------------------------------------- #
# Partitioning
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PartitionSpec:
    split_type: str = "iid"
    num_clients: int = 10
    alpha: float = 0.5
    shards_per_client: int = 2
    main_attribute: str = "label"
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")

    @classmethod
    def from_config(cls, data_config) -> "PartitionSpec":
        return cls(
            split_type=data_config.split_type,
            num_clients=data_config.num_of_clients,
            alpha=data_config.alpha,
            shards_per_client=data_config.shards_per_client,
            main_attribute=data_config.main_attribute,
            seed=data_config.seed,
        )


@dataclass(frozen=True, eq=False)
class ClientPartition:
    client_id: int
    sample_indices: np.ndarray
    label_histogram: np.ndarray
    attribute_histograms: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.sample_indices)


class PartitionList(list):
    """List of ClientPartition; ``repairs`` counts empty-client fixes applied."""

    repairs: int = 0


def _histogram(col: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(col, minlength=size).astype(np.int64)


def _finish(d: Dataset, index_lists, repairs: int = 0) -> PartitionList:
    out = PartitionList()
    for cid, idx in enumerate(index_lists):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        out.append(
            ClientPartition(
                client_id=cid,
                sample_indices=idx,
                label_histogram=_histogram(d.labels[idx], d.n_classes),
                attribute_histograms={
                    k: _histogram(v[idx], d.attribute_sizes[k]) for k, v in d.attributes.items()
                },
            )
        )
    out.repairs = repairs
    return out


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing exactly to ``total``, closest to ``total * proportions``.

    Leftover units go to the largest fractional parts; ties favour lower indices.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _repair_empty(index_lists: list[list[int]]) -> int:
    moves = 0
    while True:
        empty = [i for i, lst in enumerate(index_lists) if not lst]
        if not empty:
            return moves
        donor = max(range(len(index_lists)), key=lambda i: (len(index_lists[i]), -i))
        if len(index_lists[donor]) < 2:
            raise PartitionError("not enough samples to give every client one")
        index_lists[empty[0]].append(index_lists[donor].pop())
        moves += 1


def partition_iid(d: Dataset, spec: PartitionSpec) -> PartitionList:
    """Random permutation cut into near-equal contiguous chunks."""
    n = len(d)
    if spec.num_clients > n:
        raise PartitionError(f"{spec.num_clients} clients but only {n} samples")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    return _finish(d, np.array_split(perm, spec.num_clients))


def _dirichlet_group_counts(rng, group_sizes, num_clients, alpha_vec_for):
    """Per-group client counts; redraw everything while some client is empty."""
    counts = None
    for attempt in range(1, MAX_RESAMPLES + 1):
        counts = np.stack(
            [largest_remainder(int(n), rng.dirichlet(alpha_vec_for(g))) for g, n in enumerate(group_sizes)]
        ) if len(group_sizes) else np.zeros((0, num_clients), dtype=np.int64)
        if np.all(counts.sum(axis=0) > 0):
            return counts, attempt, False
    return counts, MAX_RESAMPLES, True


def partition_dirichlet(d: Dataset, spec: PartitionSpec) -> PartitionList:
    """Per-category Dirichlet(alpha) allocation over clients with exact integer counts.

    The category is the label unless ``spec.main_attribute`` names an attribute.
    """
    col, size = d.column(spec.main_attribute)
    rng = np.random.default_rng(spec.seed)
    k = spec.num_clients
    if k > len(d):
        raise PartitionError(f"{k} clients but only {len(d)} samples")
    groups = [np.flatnonzero(col == c) for c in range(size)]
    counts, _, exhausted = _dirichlet_group_counts(
        rng, [len(g) for g in groups], k, lambda g: np.full(k, spec.alpha)
    )
    lists: list[list[int]] = [[] for _ in range(k)]
    for g, members in enumerate(groups):
        members = rng.permutation(members)
        bounds = np.concatenate([[0], np.cumsum(counts[g])])
        for cid in range(k):
            lists[cid].extend(members[bounds[cid]:bounds[cid + 1]].tolist())
    repairs = _repair_empty(lists) if exhausted else 0
    return _finish(d, lists, repairs)


def partition_shard(d: Dataset, spec: PartitionSpec) -> PartitionList:
    """Sort by label, cut equal shards, deal ``shards_per_client`` shards per client.

    A client sees at most ``shards_per_client`` classes whenever the shard
    size divides every class count.
    """
    n = len(d)
    num_shards = spec.num_clients * spec.shards_per_client
    if num_shards > n or n % num_shards:
        raise PartitionError(
            f"{n} samples cannot be cut into {num_shards} equal shards "
            f"({spec.num_clients} clients x {spec.shards_per_client})"
        )
    rng = np.random.default_rng(spec.seed)
    order = np.argsort(d.labels, kind="stable")
    shards = order.reshape(num_shards, n // num_shards)
    deal = rng.permutation(num_shards).reshape(spec.num_clients, spec.shards_per_client)
    return _finish(d, [np.concatenate(shards[row]) for row in deal])


def _hdir_keys(d: Dataset, spec: PartitionSpec) -> tuple[str, str, str]:
    names = sorted(d.attributes)
    if len(names) < 3:
        raise PartitionError("H-Dir needs a dataset with at least three attributes")
    main = spec.main_attribute if spec.main_attribute in d.attributes else names[0]
    rest = [n for n in names if n != main][:2]
    return main, rest[0], rest[1]


def partition_hdir(d: Dataset, spec: PartitionSpec) -> PartitionList:
    """Hierarchical Dirichlet allocation over three attributes.

    Stage 1 allocates each main-attribute category across clients.  Stage 2
    splits every (client, main category) cell over the crossed categories of
    the other two attributes, with per-category concentration
    ``alpha * freq(k) / mean(freq)``.  Requests larger than what is left of an
    attribute triplet are clamped; the shortfall is later filled from the
    leftovers of the same main category so every sample lands exactly once.
    """
    main, second, third = _hdir_keys(d, spec)
    k = spec.num_clients
    if k > len(d):
        raise PartitionError(f"{k} clients but only {len(d)} samples")
    rng = np.random.default_rng(spec.seed)
    mcol, msize = d.column(main)
    scol, ssize = d.column(second)
    tcol, tsize = d.column(third)
    joint = scol * tsize + tcol
    jsize = ssize * tsize
    freq = np.bincount(joint, minlength=jsize).astype(np.float64)
    present = np.flatnonzero(freq > 0)
    conc = spec.alpha * freq[present] / freq[present].mean()

    groups = [np.flatnonzero(mcol == m) for m in range(msize)]
    cell, _, exhausted = _dirichlet_group_counts(
        rng, [len(g) for g in groups], k, lambda g: np.full(k, spec.alpha)
    )
    pools = {
        (m, j): list(rng.permutation(np.flatnonzero((mcol == m) & (joint == j))))
        for m in range(msize)
        for j in present
    }
    lists: list[list[int]] = [[] for _ in range(k)]
    for m in range(msize):
        deficit = np.zeros(k, dtype=np.int64)
        for cid in rng.permutation(k):
            n_cell = int(cell[m, cid])
            if n_cell == 0:
                continue
            want = largest_remainder(n_cell, rng.dirichlet(conc)) if len(present) > 1 else np.array([n_cell])
            for j, req in zip(present, want):
                pool = pools[(m, j)]
                take = min(int(req), len(pool))
                lists[cid].extend(pool[:take])
                del pool[:take]
                deficit[cid] += int(req) - take
        leftovers = [i for j in present for i in pools[(m, j)]]
        for j in present:
            pools[(m, j)].clear()
        assert len(leftovers) == deficit.sum()
        pos = 0
        for cid in range(k):
            need = int(deficit[cid])
            lists[cid].extend(leftovers[pos:pos + need])
            pos += need
    repairs = _repair_empty(lists) if exhausted else 0
    return _finish(d, lists, repairs)


_PARTITIONERS = {
    "iid": partition_iid,
    "dir": partition_dirichlet,
    "shard": partition_shard,
    "hdir": partition_hdir,
}


def partition(d: Dataset, spec: PartitionSpec) -> PartitionList:
    try:
        fn = _PARTITIONERS[spec.split_type]
    except KeyError:
        raise PartitionError(f"unknown split_type {spec.split_type!r}") from None
    return fn(d, spec)


def mirror_partition(train_parts, train: Dataset, test: Dataset, seed: int) -> PartitionList:
    """Split ``test`` so each client's label mix follows its training histogram.

    Test samples of class ``c`` are shared out in proportion to the clients'
    training counts of ``c`` (largest remainder).
    """
    rng = np.random.default_rng(seed)
    k = len(train_parts)
    lists: list[list[int]] = [[] for _ in range(k)]
    for c in range(test.n_classes):
        members = rng.permutation(np.flatnonzero(test.labels == c))
        weights = np.array([p.label_histogram[c] for p in train_parts], dtype=np.float64)
        if weights.sum() == 0:
            continue
        bounds = np.concatenate([[0], np.cumsum(largest_remainder(len(members), weights))])
        for cid in range(k):
            lists[cid].extend(members[bounds[cid]:bounds[cid + 1]].tolist())
    return _finish(test, lists)


# --------------------------------------------------------------------------- #
# Divergence and reports
# --------------------------------------------------------------------------- #


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats (bounded by ln 2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError(f"{name} has negative or non-finite entries")
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} sums to {v.sum()}, not 1")
    s = p + q  # 2m; avoids underflow when halving subnormal entries

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(2.0 * a[nz] / s[nz])))

    value = 0.5 * kl(p) + 0.5 * kl(q)
    return min(max(value, 0.0), LN2)


@dataclass
class HeterogeneityReport:
    key: str
    pairwise_js: np.ndarray
    sample_counts: np.ndarray
    imbalance_ratio: float
    repairs: int = 0

    @property
    def mean_js(self) -> float:
        k = len(self.sample_counts)
        if k < 2:
            return 0.0
        off = self.pairwise_js[~np.eye(k, dtype=bool)]
        return float(off.mean())


def heterogeneity_report(partitions, d: Dataset, attribute_or_label: str = "label") -> HeterogeneityReport:
    """Pairwise JS between clients' normalized histograms of one categorical column."""
    col, size = d.column(attribute_or_label)
    counts = np.array([len(p.sample_indices) for p in partitions], dtype=np.int64)
    if np.any(counts == 0):
        empty = [p.client_id for p in partitions if len(p.sample_indices) == 0]
        raise PartitionError(f"clients {empty} are empty; imbalance ratio undefined")
    dists = [_histogram(col[p.sample_indices], size) / len(p.sample_indices) for p in partitions]
    k = len(dists)
    js = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            js[i, j] = js[j, i] = js_divergence(dists[i], dists[j])
    return HeterogeneityReport(
        key=attribute_or_label,
        pairwise_js=js,
        sample_counts=counts,
        imbalance_ratio=float(counts.max() / counts.min()),
        repairs=int(getattr(partitions, "repairs", 0)),
    )


def write_mapping(path, spec: PartitionSpec, partitions) -> None:
    """One JSON object per line: the partition spec first, then one line per client."""
    lines = [json.dumps({"spec": asdict(spec), "repairs": int(getattr(partitions, "repairs", 0))}, sort_keys=True)]
    for p in partitions:
        lines.append(json.dumps({
            "client_id": p.client_id,
            "indices": p.sample_indices.tolist(),
            "label_histogram": p.label_histogram.tolist(),
            "attribute_histograms": {k: v.tolist() for k, v in sorted(p.attribute_histograms.items())},
        }, sort_keys=True))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mapping(path) -> tuple[PartitionSpec, PartitionList]:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    head = rows[0]
    parts = PartitionList(
        ClientPartition(
            client_id=r["client_id"],
            sample_indices=np.asarray(r["indices"], dtype=np.int64),
            label_histogram=np.asarray(r["label_histogram"], dtype=np.int64),
            attribute_histograms={k: np.asarray(v, dtype=np.int64) for k, v in r["attribute_histograms"].items()},
        )
        for r in rows[1:]
    )
    parts.repairs = head.get("repairs", 0)
    return PartitionSpec(**head["spec"]), parts


def write_report(path, reports) -> None:
    """Plain-text heterogeneity report: a header block and the JS matrix per key."""
    out = []
    for r in reports:
        out.append(f"key: {r.key}")
        out.append(f"clients: {len(r.sample_counts)}")
        out.append(f"mean_js: {r.mean_js:.12g}")
        out.append(f"imbalance_ratio: {r.imbalance_ratio:.12g}")
        out.append(f"repairs: {r.repairs}")
        out.append("sample_counts: " + " ".join(str(int(c)) for c in r.sample_counts))
        out.append("pairwise_js:")
        for row in r.pairwise_js:
            out.append(" ".join(f"{v:.12g}" for v in row))
        out.append("")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out))


def read_report(path) -> list[dict]:
    reports: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    i = 0
    while i < len(lines):
        if not lines[i].startswith("key: "):
            i += 1
            continue
        rec: dict = {}
        while i < len(lines) and lines[i] != "pairwise_js:":
            key, _, value = lines[i].partition(": ")
            rec[key] = value
            i += 1
        n = int(rec["clients"])
        matrix = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(n)])
        reports.append({
            "key": rec["key"],
            "mean_js": float(rec["mean_js"]),
            "imbalance_ratio": float(rec["imbalance_ratio"]),
            "repairs": int(rec["repairs"]),
            "sample_counts": [int(c) for c in rec["sample_counts"].split()],
            "pairwise_js": matrix,
        })
        i += 1 + n
    return reports
