"""Pointwise embedding network over voxel neighborhood statistics.

A ReLU MLP trunk feeds two linear heads: a d-dimensional embedding and
semantic class logits. Gradients are hand-written reverse mode; the optimizer
is ADAM. Checkpoints use a small little-endian binary format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from metricseg.errors import CheckpointError, ValidationError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
LR_DECAY = 0.8
LR_DECAY_EVERY = 10_000

CHECKPOINT_MAGIC = b"MSEGCKPT1"
_MAGIC_PREFIX = b"MSEGCKPT"

POINT_FEATURES = 6
NEIGHBORHOOD_FEATURES = 7
INPUT_WIDTH = POINT_FEATURES + NEIGHBORHOOD_FEATURES


# --- features ---------------------------------------------------------------------


@dataclass
class NeighborhoodFeatures:
    centered_position: np.ndarray  # (n, 3) position minus scene centroid
    color: np.ndarray  # (n, 3)
    density: np.ndarray  # (n,) neighbors within radius, self included
    color_mean: np.ndarray  # (n, 3)
    cov_diag: np.ndarray  # (n, 3) per-axis variance of neighbor positions
    radius: float

    def __len__(self):
        return len(self.density)

    def matrix(self):
        """Network input rows: xyz, rgb, log density, mean rgb, per-axis spread / radius."""
        return np.hstack([
            self.centered_position,
            self.color,
            np.log(self.density)[:, None],
            self.color_mean,
            np.sqrt(self.cov_diag) / self.radius,
        ])


def neighbor_pairs(positions, radius):
    """All ordered pairs (i, j), i != j, with |p_i - p_j| <= radius."""
    pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate([pairs[:, 0], pairs[:, 1]]), np.concatenate([pairs[:, 1], pairs[:, 0]])


def featurize(grid, radius):
    """Exact fixed-radius neighborhood statistics for every voxel of ``grid``."""
    if not radius > 0:
        raise ValidationError(f"radius must be > 0, got {radius}")
    pos = grid.positions
    col = grid.colors
    n = len(pos)
    src, dst = neighbor_pairs(pos, radius)
    src = np.concatenate([np.arange(n), src])
    dst = np.concatenate([np.arange(n), dst])
    density = np.bincount(src, minlength=n).astype(np.float64)

    def neighbor_mean(values):
        return np.stack([np.bincount(src, weights=values[dst, c], minlength=n) for c in range(values.shape[1])], 1) / density[:, None]

    mean_pos = neighbor_mean(pos)
    dev = pos[dst] - mean_pos[src]
    cov = np.stack([np.bincount(src, weights=dev[:, c] ** 2, minlength=n) for c in range(3)], 1) / density[:, None]
    return NeighborhoodFeatures(
        centered_position=pos - pos.mean(axis=0),
        color=col.copy(),
        density=density,
        color_mean=neighbor_mean(col),
        cov_diag=cov,
        radius=float(radius),
    )


# --- network ----------------------------------------------------------------------


@dataclass
class ModelState:
    """Parameters, ADAM moments and step counter.

    ``params`` order: for each trunk t, (W1, b1, ..., WL, bL), then embedding head
    (W, b), then semantic head (W, b). With two trunks the first feeds the
    embedding head and the second the semantic head.
    """

    params: list
    names: list
    n_trunks: int = 1
    step: int = 0
    seed: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p) for p in self.params]

    @property
    def n_hidden(self):
        return (len(self.params) - 4) // (2 * self.n_trunks)

    @property
    def input_width(self):
        return self.params[0].shape[0]

    @property
    def embed_dim(self):
        return self.params[-4].shape[1]

    @property
    def n_classes(self):
        return self.params[-2].shape[1]

    def copy(self):
        return ModelState(
            [p.copy() for p in self.params], list(self.names), self.n_trunks, self.step, self.seed,
            [a.copy() for a in self.m], [a.copy() for a in self.v],
        )


def init_model(seed=0, input_width=INPUT_WIDTH, hidden=(64, 64, 64), embed_dim=8, n_classes=5,
               separate_semantic_net=False):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params, names = [], []

    def dense(fan_in, fan_out, name):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        params.append(np.zeros(fan_out))
        names.extend([f"{name}.W", f"{name}.b"])

    n_trunks = 2 if separate_semantic_net else 1
    for t in range(n_trunks):
        width = input_width
        for i, h in enumerate(hidden):
            dense(width, h, f"trunk{t}.layer{i + 1}")
            width = h
    dense(hidden[-1], embed_dim, "embed")
    dense(hidden[-1], n_classes, "semantic")
    return ModelState(params, names, n_trunks=n_trunks, seed=seed)


def _trunk_slices(state):
    per = 2 * state.n_hidden
    return [slice(t * per, (t + 1) * per) for t in range(state.n_trunks)]


def _run_trunk(blocks, x):
    acts = [x]
    h = x
    for i in range(0, len(blocks), 2):
        h = h @ blocks[i]
        h += blocks[i + 1]
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    return acts


def _check_input(state, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.input_width:
        raise ValidationError(f"feature width {x.shape[-1] if x.ndim else 0} != model input width {state.input_width}")
    return x


def forward(state, features, return_cache=False):
    x = _check_input(state, features)
    p = state.params
    trunks = [_run_trunk(p[s], x) for s in _trunk_slices(state)]
    h_emb = trunks[0][-1]
    h_sem = trunks[-1][-1]
    emb = h_emb @ p[-4]
    emb += p[-3]
    logits = h_sem @ p[-2]
    logits += p[-1]
    if return_cache:
        return emb, logits, trunks
    return emb, logits


def backward(state, features, grad_embeddings, grad_logits, cache=None):
    """Parameter gradients of <grad_embeddings, emb> + <grad_logits, logits>."""
    x = _check_input(state, features)
    if cache is None:
        emb, logits, cache = forward(state, x, return_cache=True)
        e_shape, l_shape = emb.shape, logits.shape
    else:
        e_shape = (len(x), state.embed_dim)
        l_shape = (len(x), state.n_classes)
    g_e = np.asarray(grad_embeddings, dtype=np.float64)
    g_l = np.asarray(grad_logits, dtype=np.float64)
    if g_e.shape != e_shape or g_l.shape != l_shape:
        raise ValidationError(f"gradient shapes {g_e.shape}, {g_l.shape} do not match outputs {e_shape}, {l_shape}")

    p = state.params
    grads = [None] * len(p)
    h_emb = cache[0][-1]
    h_sem = cache[-1][-1]
    grads[-4] = h_emb.T @ g_e
    grads[-3] = g_e.sum(axis=0)
    grads[-2] = h_sem.T @ g_l
    grads[-1] = g_l.sum(axis=0)
    top = [g_e @ p[-4].T, g_l @ p[-2].T]
    if state.n_trunks == 1:
        top[0] += top[1]
        top = top[:1]

    for sl, acts, g in zip(_trunk_slices(state), cache, top):
        blocks = p[sl]
        base = sl.start
        for layer in range(len(blocks) // 2 - 1, -1, -1):
            np.multiply(g, acts[layer + 1] > 0, out=g)
            grads[base + 2 * layer] = acts[layer].T @ g
            grads[base + 2 * layer + 1] = g.sum(axis=0)
            if layer:
                g = g @ blocks[2 * layer].T
    return grads


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy and its gradient wrt the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


# --- optimization -------------------------------------------------------------------


def lr_schedule(base_lr, step):
    if step < 0:
        raise ValidationError("step must be >= 0")
    return base_lr * LR_DECAY ** (step // LR_DECAY_EVERY)


def adam_step(state, grads, lr):
    """One ADAM update in place; returns ``state``."""
    for name, g in zip(state.names, grads):
        if not np.isfinite(g).all():
            raise ValidationError(f"non-finite gradient in parameter block {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for p, m, v, g in zip(state.params, state.m, state.v, grads):
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


# --- checkpoints ----------------------------------------------------------------------


def save_checkpoint(state, path):
    """Layout: magic, u32 block count, u32 trunk count, u64 seed, per-block shapes
    (u32 ndim + u64 dims), float64 parameters, first moments, second moments,
    u64 step. All little-endian."""
    out = [CHECKPOINT_MAGIC, struct.pack("<IIQ", len(state.params), state.n_trunks, state.seed)]
    for p in state.params:
        out.append(struct.pack("<I", p.ndim))
        out.append(struct.pack(f"<{p.ndim}Q", *p.shape))
    for group in (state.params, state.m, state.v):
        for a in group:
            out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    out.append(struct.pack("<Q", state.step))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, k, what):
        if self.off + k > len(self.data):
            raise CheckpointError(f"truncated checkpoint at offset {self.off}: need {k} bytes for {what}")
        chunk = self.data[self.off:self.off + k]
        self.off += k
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        if magic.startswith(_MAGIC_PREFIX):
            raise CheckpointError(f"unsupported checkpoint version {magic[len(_MAGIC_PREFIX):]!r} at offset 0")
        raise CheckpointError("not a checkpoint file (bad magic at offset 0)")
    n_blocks, n_trunks, seed = r.unpack("<IIQ", "header")
    if n_trunks not in (1, 2) or n_blocks < 6 or (n_blocks - 4) % (2 * n_trunks):
        raise CheckpointError(f"inconsistent layout ({n_blocks} blocks, {n_trunks} trunks) at offset {len(CHECKPOINT_MAGIC)}")
    shapes = []
    for i in range(n_blocks):
        (ndim,) = r.unpack("<I", f"rank of block {i}")
        if ndim not in (1, 2):
            raise CheckpointError(f"bad rank {ndim} for block {i} at offset {r.off - 4}")
        shapes.append(r.unpack(f"<{ndim}Q", f"shape of block {i}"))
    groups = []
    for label in ("parameters", "first moments", "second moments"):
        arrs = []
        for i, shp in enumerate(shapes):
            size = int(np.prod(shp))
            raw = r.take(8 * size, f"{label} block {i}")
            arrs.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shp))
        groups.append(arrs)
    (step,) = r.unpack("<Q", "step counter")
    if r.off != len(data):
        raise CheckpointError(f"{len(data) - r.off} trailing bytes at offset {r.off}")
    state = ModelState(groups[0], [], n_trunks=n_trunks, step=step, seed=seed, m=groups[1], v=groups[2])
    state.names = _block_names(state)
    return state


def _block_names(state):
    names = []
    for t in range(state.n_trunks):
        for i in range(state.n_hidden):
            names.extend([f"trunk{t}.layer{i + 1}.W", f"trunk{t}.layer{i + 1}.b"])
    return names + ["embed.W", "embed.b", "semantic.W", "semantic.b"]
