"""Point clouds, sparse voxelization and the v1 text point-cloud format."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metricseg.errors import ValidationError

FORMAT_TAG = "metricseg-pc"
FORMAT_VERSION = "v1"

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1


@dataclass
class PointCloud:
    """Ordered points with colors and optional per-point instance/semantic ids.

    Instance id 0 is the "no instance" sentinel (background, noise).
    """

    positions: np.ndarray
    colors: np.ndarray
    instance_ids: np.ndarray | None = None
    semantic_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if len(self.colors) != n:
            raise ValidationError(f"{len(self.colors)} colors for {n} points")
        for name in ("instance_ids", "semantic_ids"):
            ids = getattr(self, name)
            if ids is None:
                continue
            ids = np.asarray(ids, dtype=np.int64).reshape(-1)
            if len(ids) != n:
                raise ValidationError(f"{name} has {len(ids)} entries for {n} points")
            setattr(self, name, ids)

    def __len__(self):
        return len(self.positions)

    def validate(self):
        bad = np.flatnonzero(~np.isfinite(self.positions).all(axis=1))
        if len(bad):
            raise ValidationError(f"non-finite coordinate at point {bad[0]}")
        bad = np.flatnonzero(((self.colors < 0) | (self.colors > 1) | ~np.isfinite(self.colors)).any(axis=1))
        if len(bad):
            raise ValidationError(f"color outside [0, 1] at point {bad[0]}")
        for name in ("instance_ids", "semantic_ids"):
            ids = getattr(self, name)
            if ids is not None and len(ids) and ids.min() < 0:
                raise ValidationError(f"negative {name} at point {int(np.argmin(ids))}")

    def features(self):
        """Per-point input features: xyz followed by rgb (width 6)."""
        return np.hstack([self.positions, self.colors])

    def copy(self):
        return PointCloud(
            self.positions.copy(),
            self.colors.copy(),
            None if self.instance_ids is None else self.instance_ids.copy(),
            None if self.semantic_ids is None else self.semantic_ids.copy(),
        )


def voxel_key(coord):
    """Pack an integer 3-coordinate into a 63-bit key.

    Each component must lie in [-2**20, 2**20). Accepts a single triple or an
    (n, 3) array; key order equals lexicographic coordinate order.
    """
    c = np.asarray(coord, dtype=np.int64)
    single = c.ndim == 1
    c = c.reshape(-1, 3)
    if len(c) and (c.min() < -KEY_OFFSET or c.max() >= KEY_OFFSET):
        raise ValidationError(f"voxel coordinate out of range [-2^20, 2^20): {c[np.argmax(np.abs(c).max(axis=1))]}")
    u = c + KEY_OFFSET
    keys = (u[:, 0] << (2 * KEY_BITS)) | (u[:, 1] << KEY_BITS) | u[:, 2]
    return int(keys[0]) if single else keys


def key_to_coord(keys):
    keys = np.asarray(keys, dtype=np.int64)
    x = (keys >> (2 * KEY_BITS)) & KEY_MASK
    y = (keys >> KEY_BITS) & KEY_MASK
    z = keys & KEY_MASK
    return np.stack([x, y, z], axis=-1) - KEY_OFFSET


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse voxel cells sorted lexicographically by integer coordinate.

    ``members`` lists point indices grouped by cell (CSR layout with ``offsets``).
    Majority ids are -1 when the source cloud had no ids of that kind.
    """

    voxel_size: float
    coords: np.ndarray
    features: np.ndarray
    instance_ids: np.ndarray
    semantic_ids: np.ndarray
    point_to_voxel: np.ndarray
    members: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.coords)

    @property
    def n_points(self):
        return len(self.point_to_voxel)

    @property
    def positions(self):
        return self.features[:, :3]

    @property
    def colors(self):
        return self.features[:, 3:6]

    def cell_members(self, i):
        return self.members[self.offsets[i]:self.offsets[i + 1]]

    def counts(self):
        return np.diff(self.offsets)


def _majority(cell, labels, n_cells):
    # lowest label wins ties
    lo = labels.min()
    span = int(labels.max() - lo) + 1
    combined, counts = np.unique(cell * span + (labels - lo), return_counts=True)
    pair_cell = combined // span
    order = np.lexsort((combined, -counts, pair_cell))
    pair_cell = pair_cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pair_cell[1:] != pair_cell[:-1]
    out = np.empty(n_cells, dtype=np.int64)
    out[pair_cell[first]] = combined[order][first] % span + lo
    return out


def voxelize(cloud, voxel_size):
    """Group points into cubic cells of side ``voxel_size`` (meters).

    Cell features are the mean xyz+rgb of member points; instance and semantic
    ids are majority votes with ties going to the lowest id.
    """
    if not voxel_size > 0:
        raise ValidationError(f"voxel_size must be > 0, got {voxel_size}")
    n = len(cloud)
    if n == 0:
        raise ValidationError("empty input")
    bad = np.flatnonzero(~np.isfinite(cloud.positions).all(axis=1))
    if len(bad):
        raise ValidationError(f"non-finite coordinate at point {bad[0]}")

    coords = np.floor(cloud.positions / voxel_size).astype(np.int64)
    keys = voxel_key(coords)
    cell_keys, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(cell_keys)

    feats = cloud.features()
    means = np.empty((n_cells, feats.shape[1]))
    for j in range(feats.shape[1]):
        means[:, j] = np.bincount(inverse, weights=feats[:, j], minlength=n_cells) / counts

    members = np.argsort(inverse, kind="stable")
    offsets = np.zeros(n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    def vote(ids):
        if ids is None:
            return np.full(n_cells, -1, dtype=np.int64)
        return _majority(inverse, ids, n_cells)

    return VoxelGrid(
        voxel_size=float(voxel_size),
        coords=key_to_coord(cell_keys),
        features=means,
        instance_ids=vote(cloud.instance_ids),
        semantic_ids=vote(cloud.semantic_ids),
        point_to_voxel=inverse.astype(np.int64),
        members=members,
        offsets=offsets,
    )


def devoxelize(grid, per_voxel_labels):
    """Broadcast one label per cell back to every point of the source cloud."""
    labels = np.asarray(per_voxel_labels)
    if labels.shape[0] != len(grid):
        raise ValidationError(f"got {labels.shape[0]} labels for {len(grid)} cells")
    return labels[grid.point_to_voxel]


# --- v1 text format -------------------------------------------------------


def write_point_cloud(cloud, path):
    has_inst = cloud.instance_ids is not None
    has_sem = cloud.semantic_ids is not None
    buf = io.StringIO()
    buf.write(f"{FORMAT_TAG} {FORMAT_VERSION} {len(cloud)} {int(has_inst)} {int(has_sem)}\n")
    cols = [cloud.positions, cloud.colors]
    fmt = ["%.9g"] * 6
    if has_inst:
        cols.append(cloud.instance_ids[:, None])
        fmt.append("%d")
    if has_sem:
        cols.append(cloud.semantic_ids[:, None])
        fmt.append("%d")
    if len(cloud):
        table = np.hstack([c.astype(object) for c in cols]) if (has_inst or has_sem) else np.hstack(cols)
        np.savetxt(buf, table, fmt=fmt)
    Path(path).write_text(buf.getvalue())


def read_point_cloud(path):
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != FORMAT_TAG:
        raise ValidationError(f"{path}: bad header {lines[0]!r}")
    if head[1] != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported version {head[1]}")
    try:
        n, has_inst, has_sem = int(head[2]), bool(int(head[3])), bool(int(head[4]))
    except ValueError:
        raise ValidationError(f"{path}: bad header {lines[0]!r}") from None
    width = 6 + has_inst + has_sem
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ValidationError(f"{path}: header says {n} points, found {len(body)}")
    if n == 0:
        table = np.zeros((0, width))
    else:
        try:
            table = np.loadtxt(io.StringIO("\n".join(body)), ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    if table.shape[1] != width:
        raise ValidationError(f"{path}: expected {width} columns, found {table.shape[1]}")
    col = 6
    inst = sem = None
    if has_inst:
        inst = table[:, col].astype(np.int64)
        col += 1
    if has_sem:
        sem = table[:, col].astype(np.int64)
    cloud = PointCloud(table[:, :3], table[:, 3:6], inst, sem)
    cloud.validate()
    return cloud
