"""Activation-sign regions of a ReLU network and the populated-region statistics.

A region at layer ``l`` is identified by the sign vector of the layer's
pre-activation output, stored bit-packed (bit set <=> value > 0; exact zeros
count as negative). Only regions that contain at least one sample are ever
materialised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import Model


class LayerMismatchError(RuntimeError):
    pass


class EmptyClassError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SignPattern:
    """Bit-packed sign vector. Ordering is lexicographic over the sign sequence (-1 < +1)."""

    layer_index: int
    length: int
    bits: bytes

    @classmethod
    def from_features(cls, features: np.ndarray, layer_index: int) -> "SignPattern":
        f = np.asarray(features).reshape(-1)
        return cls(layer_index, f.size, np.packbits(f > 0).tobytes())

    def signs(self) -> np.ndarray:
        raw = np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8))[: self.length]
        return np.where(raw == 1, 1, -1).astype(np.int8)

    def hamming(self, other: "SignPattern") -> int:
        a = np.frombuffer(self.bits, dtype=np.uint8)
        b = np.frombuffer(other.bits, dtype=np.uint8)
        return int(np.unpackbits(a ^ b).sum())

    def hex(self) -> str:
        return self.bits.hex()


def pack_patterns(features: np.ndarray) -> np.ndarray:
    """Row-wise packed sign bits of an [N, D] feature array -> [N, ceil(D/8)] uint8."""
    return np.packbits(features.reshape(len(features), -1) > 0, axis=1)


def sign_pattern(model: Model, x, l: int) -> SignPattern:
    f = model.features_numpy(np.asarray(x)[None] if np.ndim(x) == len(model.input_shape) else x, l)
    if len(f) != 1:
        raise ValueError("sign_pattern takes a single input")
    return SignPattern.from_features(f[0], l)


@dataclass
class RegionSet:
    """Populated regions at one layer with per-class occupancy counts."""

    layer_index: int
    width: int
    num_classes: int
    counts: dict = field(default_factory=dict)  # SignPattern -> int64[num_classes]; insertion ordered
    total: int = 0

    def add(self, packed_rows: np.ndarray, labels: np.ndarray):
        for row, y in zip(packed_rows, labels):
            key = SignPattern(self.layer_index, self.width, row.tobytes())
            c = self.counts.get(key)
            if c is None:
                c = self.counts[key] = np.zeros(self.num_classes, dtype=np.int64)
            c[int(y)] += 1
            self.total += 1

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, pattern: SignPattern) -> bool:
        return pattern in self.counts

    def patterns(self) -> list[SignPattern]:
        return list(self.counts)

    def class_regions(self, c: int) -> list[tuple[SignPattern, int]]:
        return [(p, int(v[c])) for p, v in self.counts.items() if v[c] > 0]

    def merge(self, other: "RegionSet") -> "RegionSet":
        """Combine partial sets built on disjoint sample shards; order is re-sorted by pattern."""
        if (other.layer_index, other.width) != (self.layer_index, self.width):
            raise LayerMismatchError("cannot merge region sets from different layers")
        merged: dict = {}
        for src in (self.counts, other.counts):
            for p, v in src.items():
                merged[p] = merged[p] + v if p in merged else v.copy()
        out = RegionSet(self.layer_index, self.width, self.num_classes, total=self.total + other.total)
        out.counts = {p: merged[p] for p in sorted(merged)}
        return out

    def summary(self) -> dict:
        sizes = sorted((int(v.sum()) for v in self.counts.values()), reverse=True)
        return {
            "layer": self.layer_index,
            "width": self.width,
            "num_samples": self.total,
            "num_regions": len(self),
            "prs_ratio": prs_ratio(self, self.total) if self.total else None,
            "largest_region_sizes": sizes[:10],
            "singleton_regions": sum(1 for s in sizes if s == 1),
        }


def build_prs(model: Model, dataset: Dataset, l: int, batch_size: int = 1024) -> RegionSet:
    if len(dataset) == 0:
        raise ValueError("build_prs needs a nonempty dataset")
    rs = RegionSet(l, model.layer_width(l), dataset.num_classes)
    for start in range(0, len(dataset), batch_size):
        f = model.features_numpy(dataset.inputs[start:start + batch_size], l)
        rs.add(pack_patterns(f), dataset.labels[start:start + batch_size])
    return rs


def prs_ratio(region_set: RegionSet, dataset_size: int) -> float:
    if dataset_size <= 0:
        raise ValueError("dataset_size must be positive")
    return len(region_set) / dataset_size


def prs_depth_profile(model: Model, dataset: Dataset) -> list[tuple[int, int]]:
    """(layer, |PRS|) for every hidden layer 1..L-1."""
    return [(l, len(build_prs(model, dataset, l))) for l in range(1, model.num_layers)]


def inclusion_split(model: Model, train_regions: RegionSet, test_dataset: Dataset, l: int):
    """Indices of test samples whose pattern is / is not a training region, and the ratio."""
    if train_regions.layer_index != l:
        raise LayerMismatchError(f"region set is for layer {train_regions.layer_index}, not {l}")
    f = model.features_numpy(test_dataset.inputs, l)
    packed = pack_patterns(f)
    member = np.array(
        [SignPattern(l, train_regions.width, row.tobytes()) in train_regions.counts for row in packed],
        dtype=bool,
    )
    included = np.flatnonzero(member)
    excluded = np.flatnonzero(~member)
    ratio = len(included) / len(test_dataset) if len(test_dataset) else 0.0
    return included, excluded, ratio


@dataclass
class MajorRegion:
    pattern: SignPattern
    count: int  # class-c samples inside the region
    mrv: np.ndarray  # [D_l]


@dataclass
class MajorRegionTable:
    layer_index: int
    regions: dict  # class -> MajorRegion

    def mrv_matrix(self, num_classes: int) -> np.ndarray:
        d = next(iter(self.regions.values())).mrv.size
        m = np.full((num_classes, d), np.nan)
        for c, r in self.regions.items():
            m[c] = r.mrv
        return m

    def extra_region_mask(self, model: Model, dataset: Dataset) -> np.ndarray:
        """True where a sample does NOT sit in its own class's major region."""
        f = model.features_numpy(dataset.inputs, self.layer_index)
        packed = pack_patterns(f)
        out = np.ones(len(dataset), dtype=bool)
        for i, (row, y) in enumerate(zip(packed, dataset.labels)):
            r = self.regions.get(int(y))
            if r is not None and row.tobytes() == r.pattern.bits:
                out[i] = False
        return out


def major_regions(region_set: RegionSet, model: Model, dataset: Dataset, l: int) -> MajorRegionTable:
    """Per class: most-populated region (ties -> smallest pattern) and the mean feature inside it.

    The mean is over that class's samples in the region, so its divisor is
    their count.
    """
    if region_set.layer_index != l:
        raise LayerMismatchError(f"region set is for layer {region_set.layer_index}, not {l}")
    f = model.features_numpy(dataset.inputs, l)
    packed = pack_patterns(f)
    table = {}
    for c in range(dataset.num_classes):
        cand = region_set.class_regions(c)
        if not cand:
            raise EmptyClassError(f"class {c} has no samples at layer {l}")
        best = max(n for _, n in cand)
        pattern = min(p for p, n in cand if n == best)
        sel = (dataset.labels == c) & np.all(packed == np.frombuffer(pattern.bits, dtype=np.uint8), axis=1)
        if not sel.any():
            raise EmptyClassError(f"class {c}: major region holds no samples of this dataset")
        table[c] = MajorRegion(pattern, int(sel.sum()), f[sel].astype(np.float64).mean(axis=0))
    return MajorRegionTable(l, table)


def mrv_distance(model: Model, x, mrv_table: MajorRegionTable, c: int, l: int) -> float:
    f = model.features_numpy(np.asarray(x)[None] if np.ndim(x) == len(model.input_shape) else x, l)
    return float(np.linalg.norm(f[0].astype(np.float64) - mrv_table.regions[c].mrv))


# -- 2-D slices ---------------------------------------------------------------

@dataclass
class SliceMap:
    region_ids: np.ndarray  # [nu, nv] int, first-encounter ordinals
    predictions: np.ndarray  # [nu, nv] int
    u: np.ndarray  # [nu]
    v: np.ndarray  # [nv]
    origin: np.ndarray
    basis: np.ndarray  # [2, D_x], orthonormal rows
    anchor_coords: np.ndarray  # [3, 2]
    patterns: list  # region id -> SignPattern

    def cell_of(self, coord) -> tuple[int, int]:
        return int(np.abs(self.u - coord[0]).argmin()), int(np.abs(self.v - coord[1]).argmin())

    def anchor_cells(self) -> list[tuple[int, int]]:
        return [self.cell_of(c) for c in self.anchor_coords]

    def point(self, iu: int, iv: int) -> np.ndarray:
        return self.origin + self.u[iu] * self.basis[0] + self.v[iv] * self.basis[1]

    def region_id_of(self, pattern: SignPattern) -> int | None:
        try:
            return self.patterns.index(pattern)
        except ValueError:
            return None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iu", "iv", "u", "v", "region_id", "predicted_class"])
            for iu in range(len(self.u)):
                for iv in range(len(self.v)):
                    w.writerow([iu, iv, f"{self.u[iu]:.6g}", f"{self.v[iv]:.6g}",
                                int(self.region_ids[iu, iv]), int(self.predictions[iu, iv])])


def plane_basis(anchors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gram-Schmidt basis of the plane through three anchors; returns (origin, basis, anchor coords)."""
    a = [np.asarray(p, dtype=np.float64).reshape(-1) for p in anchors]
    if len(a) != 3:
        raise GeometryError("need exactly three anchors")
    d1, d2 = a[1] - a[0], a[2] - a[0]
    n1 = np.linalg.norm(d1)
    if n1 < 1e-12:
        raise GeometryError("anchors 1 and 2 coincide")
    e1 = d1 / n1
    r = d2 - (d2 @ e1) * e1
    n2 = np.linalg.norm(r)
    if n2 < 1e-9 * max(1.0, np.linalg.norm(d2)):
        raise GeometryError("anchors are collinear")
    e2 = r / n2
    coords = np.array([[0.0, 0.0], [n1, 0.0], [d2 @ e1, d2 @ e2]])
    return a[0], np.stack([e1, e2]), coords


def plane_slice_region_map(model: Model, anchors, grid=(100, 100), extent=None, l: int | None = None,
                           margin: float = 0.25, batch_size: int = 4096) -> SliceMap:
    """Region ids and predictions on a grid over the plane spanned by three anchors.

    ``extent`` is (u_min, u_max, v_min, v_max) in plane coordinates; by default
    it is the anchors' bounding box padded by ``margin`` of its size. Grid
    points are not clipped to [0, 1].
    """
    l = model.penultimate_index if l is None else l
    origin, basis, coords = plane_basis(anchors)
    nu, nv = grid
    if extent is None:
        lo, hi = coords.min(axis=0), coords.max(axis=0)
        pad = margin * (hi - lo)
        extent = (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])
    u = np.linspace(extent[0], extent[1], nu)
    v = np.linspace(extent[2], extent[3], nv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = origin[None] + uu.reshape(-1, 1) * basis[0] + vv.reshape(-1, 1) * basis[1]
    pts = pts.reshape((-1,) + tuple(model.input_shape)).astype(model.dtype)

    feats = model.features_numpy(pts, l, batch_size)
    preds = model.predict(pts, batch_size) if l != model.num_layers else feats.argmax(axis=1)
    packed = pack_patterns(feats)
    ids = np.empty(len(packed), dtype=np.int64)
    seen: dict = {}
    patterns = []
    width = feats.shape[1]
    for i, row in enumerate(packed):
        key = row.tobytes()
        rid = seen.get(key)
        if rid is None:
            rid = seen[key] = len(patterns)
            patterns.append(SignPattern(l, width, key))
        ids[i] = rid
    return SliceMap(ids.reshape(nu, nv), preds.reshape(nu, nv), u, v, origin, basis, coords, patterns)


def write_depth_profile(profile, dataset_size: int, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "num_regions", "prs_ratio"])
        for l, n in profile:
            w.writerow([l, n, f"{n / dataset_size:.6f}"])


def write_major_regions(table: MajorRegionTable, region_set: RegionSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "mr_count", "class_total", "class_regions", "mrv_norm", "pattern_hex"])
        for c, r in sorted(table.regions.items()):
            regs = region_set.class_regions(c)
            w.writerow([c, r.count, sum(n for _, n in regs), len(regs),
                        f"{np.linalg.norm(r.mrv):.6f}", r.pattern.hex()])

