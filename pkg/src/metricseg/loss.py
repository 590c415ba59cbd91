"""Discriminative embedding loss with size-weighted pull term.

Naming follows the source method, which is inverted relative to the usual
convention: ``inter_loss`` is the *attractive* term pulling each embedding
toward its instance mean, ``intra_loss`` is the *repulsive* term pushing
instance means apart. There is no regularization term.

    total = inter + gamma_intra * intra
    inter = 1/|I| * sum_i  n_i^p / sum_j n_j^p * l_i
    l_i   = 1/n_i * sum_{k in E_i} [ |mu_i - e_k| - delta_inter ]_+
    intra = 1/(|I|(|I|-1)) * sum_{i != j} [ 2 delta_intra - |mu_i - mu_j| ]_+
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metricseg.errors import ValidationError


@dataclass(frozen=True)
class LossParams:
    delta_inter: float = 0.1
    delta_intra: float = 0.5
    gamma_intra: float = 10.0
    p: float = 1.0

    def __post_init__(self):
        if min(self.delta_inter, self.delta_intra, self.gamma_intra) < 0:
            raise ValidationError("loss margins and weight must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"p must lie in [0, 1], got {self.p}")
        if not self.delta_intra > self.delta_inter:
            raise ValidationError("need delta_intra > delta_inter for separated instances")


@dataclass(frozen=True)
class InstancePartition:
    """Grouping of embedding rows by instance label; rows with label < 0 are ignored."""

    labels: np.ndarray
    instance_ids: np.ndarray
    index: np.ndarray  # per row: position in instance_ids, or -1
    sizes: np.ndarray

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        keep = labels >= 0
        ids, inv = np.unique(labels[keep], return_inverse=True)
        index = np.full(len(labels), -1, dtype=np.int64)
        index[keep] = inv
        return cls(labels, ids, index, np.bincount(inv, minlength=len(ids)))

    @property
    def n_instances(self):
        return len(self.instance_ids)

    def members(self, i):
        return np.flatnonzero(self.index == i)


def _as_partition(partition):
    if isinstance(partition, InstancePartition):
        return partition
    return InstancePartition.from_labels(partition)


def instance_means(embeddings, partition):
    part = _as_partition(partition)
    emb = np.asarray(embeddings, dtype=np.float64)
    if len(part.labels) != len(emb):
        raise ValidationError(f"{len(part.labels)} labels for {len(emb)} embeddings")
    if part.n_instances == 0 or (part.sizes == 0).any():
        raise ValidationError("every instance needs at least one member")
    keep = part.index >= 0
    idx = part.index[keep]
    sums = np.stack([np.bincount(idx, weights=col, minlength=part.n_instances) for col in emb[keep].T], axis=1)
    return sums / part.sizes[:, None]


def instance_weights(sizes, p):
    w = np.asarray(sizes, dtype=np.float64) ** p
    return w / w.sum()


def _residuals(emb, part, means):
    keep = part.index >= 0
    rows = np.flatnonzero(keep)
    r = emb[rows] - means[part.index[rows]]
    return rows, r, np.sqrt((r * r).sum(axis=1))


def per_instance_pull(embeddings, partition, params, means=None):
    """l_i for every instance: mean hinge distance beyond delta_inter to the instance mean."""
    part = _as_partition(partition)
    emb = np.asarray(embeddings, dtype=np.float64)
    if means is None:
        means = instance_means(emb, part)
    rows, _, rho = _residuals(emb, part, means)
    hinge = np.maximum(rho - params.delta_inter, 0.0)
    return np.bincount(part.index[rows], weights=hinge, minlength=part.n_instances) / part.sizes


def inter_loss(embeddings, partition, params):
    part = _as_partition(partition)
    l = per_instance_pull(embeddings, part, params)
    w = instance_weights(part.sizes, params.p)
    return float((w * l).sum() / part.n_instances)


def intra_loss(means, params):
    means = np.asarray(means, dtype=np.float64)
    k = len(means)
    if k < 2:
        return 0.0
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    hinge = np.maximum(2 * params.delta_intra - dist, 0.0)
    np.fill_diagonal(hinge, 0.0)
    return float(hinge.sum() / (k * (k - 1)))


def total_loss(embeddings, partition, params):
    part = _as_partition(partition)
    means = instance_means(embeddings, part)
    return inter_loss(embeddings, part, params) + params.gamma_intra * intra_loss(means, params)


def loss_and_gradients(embeddings, partition, params):
    """Return (total, inter, intra, grad) where grad has the shape of ``embeddings``.

    The instance means are differentiated through (not treated as constants).
    Hinges contribute zero subgradient at exactly zero, and so do zero-length
    distance vectors. Rows outside the partition get zero gradient.
    """
    part = _as_partition(partition)
    emb = np.asarray(embeddings, dtype=np.float64)
    means = instance_means(emb, part)
    n_inst = part.n_instances
    sizes = part.sizes.astype(np.float64)
    grad = np.zeros_like(emb)

    # pull term
    rows, r, rho = _residuals(emb, part, means)
    inst = part.index[rows]
    arg = rho - params.delta_inter
    active = (arg > 0) & (rho > 0)
    hinge = np.where(active, arg, 0.0)
    l = np.bincount(inst, weights=hinge, minlength=n_inst) / sizes
    w = instance_weights(part.sizes, params.p)
    inter = float((w * l).sum() / n_inst)

    u = np.zeros_like(r)
    u[active] = r[active] / rho[active, None]
    coef = w / (n_inst * sizes)  # d inter / d hinge_k for k in E_i
    gk = coef[inst, None] * u
    # mean dependence: d rho_k / d e_m includes -u_k / n_i for every m in E_i
    usum = np.stack([np.bincount(inst, weights=col, minlength=n_inst) for col in gk.T], axis=1)
    grad[rows] = gk - usum[inst] / sizes[inst, None]

    # push term
    intra = 0.0
    if n_inst >= 2:
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        h = 2 * params.delta_intra - dist
        np.fill_diagonal(h, 0.0)
        intra = float(np.maximum(h, 0.0).sum() / (n_inst * (n_inst - 1)))
        act = (h > 0) & (dist > 0)
        safe = np.where(act, dist, 1.0)
        # both ordered pairs (i, j) and (j, i) contribute the same derivative wrt mu_i
        g_mu = -2.0 * ((act / safe)[:, :, None] * diff).sum(axis=1)
        g_mu *= params.gamma_intra / (n_inst * (n_inst - 1))
        grad[rows] += g_mu[inst] / sizes[inst, None]

    return inter + params.gamma_intra * intra, inter, intra, grad


def loss_gradients(embeddings, partition, params):
    return loss_and_gradients(embeddings, partition, params)[3]
