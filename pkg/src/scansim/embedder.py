"""Retrieval-embedding pipeline: stage embedding lookup, input assembly,
the residual MLP that maps assembled scanning contexts into a 256-dim
metric space, its triplet-loss training loop (AdamW, cosine schedule with
warmup, implemented on numpy), a deterministic surrogate image featurizer,
and the two-layer cross-modality projector forward pass.

All math runs in float64 so results can be checked against dense-matrix
and finite-difference oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import erf

from .errors import DivergedLoss, EmptyDataset, ShapeMismatch
from .volume import SliceImage
from .workflow import ScanStage

FEATURE_DIM = 768
STAGE_EMBED_DIM = 16
INPUT_DIM = 2 * FEATURE_DIM + STAGE_EMBED_DIM      # 1552
EMBED_DIM = 256
DEFAULT_MARGIN = 0.75

#: Per-stage scalar filling the constant 16-dim stage embedding, in stage
#: order 1..8. Note the gap between 0.2 and 0.4.
STAGE_EMBED_SCALARS = {
    ScanStage.EXAMINE_CCA_PROXIMAL: 0.1,
    ScanStage.EXAMINE_CCA_DISTAL: 0.2,
    ScanStage.EXAMINE_BIFURCATION: 0.4,
    ScanStage.TRANSVERSE_SCAN_COMPLETED: 0.5,
    ScanStage.RETURN_TO_CAROTID_BULB: 0.6,
    ScanStage.RETURN_COMPLETED: 0.7,
    ScanStage.ROTATE_TO_LONGITUDINAL_VIEW: 0.8,
    ScanStage.LONGITUDINAL_SCAN_COMPLETED: 0.9,
}


def stage_embedding(stage: ScanStage) -> np.ndarray:
    """Constant 16-dim embedding vector for a stage."""
    return np.full(STAGE_EMBED_DIM, STAGE_EMBED_SCALARS[ScanStage(stage)])


def assemble_input(f_prev: np.ndarray, f_curr: np.ndarray,
                   prev_stage: ScanStage) -> np.ndarray:
    """Concatenate [f_prev | f_curr | stage_embedding(prev_stage)] into the
    1552-dim retrieval input."""
    f_prev = np.asarray(f_prev, dtype=float)
    f_curr = np.asarray(f_curr, dtype=float)
    if f_prev.shape != (FEATURE_DIM,) or f_curr.shape != (FEATURE_DIM,):
        raise ShapeMismatch("image features must be 768-dim")
    return np.concatenate([f_prev, f_curr, stage_embedding(prev_stage)])


# ---------------------------------------------------------------------------
# GELU (exact, erf form) and its derivative
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


# ---------------------------------------------------------------------------
# ResMLP
# ---------------------------------------------------------------------------

@dataclass
class ResMlpParams:
    """Weights of the retrieval embedder: an input affine map followed by
    residual blocks x -> x + W @ gelu(x) + b."""

    w_in: np.ndarray                 # (hidden, in_dim)
    b_in: np.ndarray                 # (hidden,)
    block_weights: List[np.ndarray]  # each (hidden, hidden)
    block_biases: List[np.ndarray]   # each (hidden,)

    def __post_init__(self):
        hidden, _ = self.w_in.shape
        if self.b_in.shape != (hidden,):
            raise ShapeMismatch("b_in shape")
        for W, b in zip(self.block_weights, self.block_biases):
            if W.shape != (hidden, hidden) or b.shape != (hidden,):
                raise ShapeMismatch("block shapes")

    @property
    def in_dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_in.shape[0]

    @property
    def block_count(self) -> int:
        return len(self.block_weights)

    @classmethod
    def init(cls, in_dim: int = INPUT_DIM, hidden_dim: int = EMBED_DIM,
             blocks: int = 2, seed: int = 0) -> "ResMlpParams":
        """Glorot-style random initialization, reproducible per seed."""
        rng = np.random.default_rng(seed)
        def glorot(fan_out, fan_in):
            s = np.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, s, size=(fan_out, fan_in))
        return cls(
            w_in=glorot(hidden_dim, in_dim),
            b_in=np.zeros(hidden_dim),
            block_weights=[glorot(hidden_dim, hidden_dim) for _ in range(blocks)],
            block_biases=[np.zeros(hidden_dim) for _ in range(blocks)],
        )

    def tensors(self) -> List[np.ndarray]:
        """Parameter tensors in declaration order (the file blob order)."""
        out = [self.w_in, self.b_in]
        for W, b in zip(self.block_weights, self.block_biases):
            out.extend([W, b])
        return out

    def copy(self) -> "ResMlpParams":
        return ResMlpParams(self.w_in.copy(), self.b_in.copy(),
                            [W.copy() for W in self.block_weights],
                            [b.copy() for b in self.block_biases])


def resmlp_forward(params: ResMlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single vector or a batch (B, in_dim)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.in_dim:
        raise ShapeMismatch(
            f"input dim {X.shape[1]} != expected {params.in_dim}")
    H = X @ params.w_in.T + params.b_in
    for W, b in zip(params.block_weights, params.block_biases):
        H = H + gelu(H) @ W.T + b
    return H[0] if single else H


def _forward_cached(params: ResMlpParams, X: np.ndarray):
    """Forward pass keeping per-layer pre-activations for backprop."""
    hs = [X @ params.w_in.T + params.b_in]
    for W, b in zip(params.block_weights, params.block_biases):
        hs.append(hs[-1] + gelu(hs[-1]) @ W.T + b)
    return hs


def _backward(params: ResMlpParams, X: np.ndarray, hs, dOut: np.ndarray):
    """Backprop dLoss/dOutput through the ResMLP; returns gradients in
    tensors() order."""
    n_blocks = params.block_count
    dW_blocks = [None] * n_blocks
    db_blocks = [None] * n_blocks
    dh = dOut
    for l in range(n_blocks - 1, -1, -1):
        h_prev = hs[l]
        g = gelu(h_prev)
        dW_blocks[l] = dh.T @ g
        db_blocks[l] = dh.sum(axis=0)
        dh = dh + (dh @ params.block_weights[l]) * gelu_grad(h_prev)
    dw_in = dh.T @ X
    db_in = dh.sum(axis=0)
    grads = [dw_in, db_in]
    for W, b in zip(dW_blocks, db_blocks):
        grads.extend([W, b])
    return grads


# ---------------------------------------------------------------------------
# Triplet loss
# ---------------------------------------------------------------------------

def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray,
                 margin: float = DEFAULT_MARGIN) -> float:
    """max(||a - p|| - ||a - n|| + margin, 0)."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    a, p, n = (np.asarray(v, dtype=float) for v in (a, p, n))
    d_ap = np.linalg.norm(a - p)
    d_an = np.linalg.norm(a - n)
    return float(max(d_ap - d_an + margin, 0.0))


def batch_triplet_loss_and_grads(A: np.ndarray, P: np.ndarray, N: np.ndarray,
                                 margin: float):
    """Mean triplet loss over a batch plus gradients w.r.t. the three
    embedding matrices. Zero-distance pairs contribute zero gradient
    (subgradient convention)."""
    eps = 1e-12
    dap_vec = A - P
    dan_vec = A - N
    d_ap = np.linalg.norm(dap_vec, axis=1)
    d_an = np.linalg.norm(dan_vec, axis=1)
    raw = d_ap - d_an + margin
    active = raw > 0
    loss = float(np.mean(np.maximum(raw, 0.0)))

    B = A.shape[0]
    scale = active.astype(float) / B
    u_ap = dap_vec / np.maximum(d_ap, eps)[:, None]
    u_an = dan_vec / np.maximum(d_an, eps)[:, None]
    u_ap[d_ap < eps] = 0.0
    u_an[d_an < eps] = 0.0
    dA = scale[:, None] * (u_ap - u_an)
    dP = scale[:, None] * (-u_ap)
    dN = scale[:, None] * u_an
    return loss, dA, dP, dN


def batch_loss_and_param_grads(params: ResMlpParams, A_in: np.ndarray,
                               P_in: np.ndarray, N_in: np.ndarray,
                               margin: float = DEFAULT_MARGIN):
    """Mean triplet loss of a batch of assembled inputs and its analytic
    gradient for every parameter tensor."""
    hs_a = _forward_cached(params, A_in)
    hs_p = _forward_cached(params, P_in)
    hs_n = _forward_cached(params, N_in)
    loss, dA, dP, dN = batch_triplet_loss_and_grads(
        hs_a[-1], hs_p[-1], hs_n[-1], margin)
    grads = _backward(params, A_in, hs_a, dA)
    for g, extra in zip(grads, _backward(params, P_in, hs_p, dP)):
        g += extra
    for g, extra in zip(grads, _backward(params, N_in, hs_n, dN)):
        g += extra
    return loss, grads


# ---------------------------------------------------------------------------
# Training: AdamW with cosine decay + linear warmup
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    val_batch_size: int = 64
    lr: float = 3e-6
    weight_decay: float = 1e-5
    warmup_frac: float = 0.1
    margin: float = DEFAULT_MARGIN
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_frac: float) -> float:
    """Linear warmup over the first warmup_frac of steps, then cosine decay
    to zero."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    t = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))


def train_resmlp(anchors: np.ndarray, positives: np.ndarray,
                 negatives: np.ndarray, config: TrainConfig = None,
                 seed: int = 0, params: ResMlpParams = None,
                 val: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None):
    """Train the embedder on pre-assembled triplet inputs.

    Returns (params, history) where history holds one mean training loss
    per epoch (plus validation losses when a val split is given).
    Reproducible per seed: shuffling, init, and reduction order are fixed.
    """
    config = config or TrainConfig()
    A = np.asarray(anchors, dtype=float)
    P = np.asarray(positives, dtype=float)
    N = np.asarray(negatives, dtype=float)
    if A.size == 0:
        raise EmptyDataset("no triplets to train on")
    if not (A.shape == P.shape == N.shape):
        raise ShapeMismatch("anchor/positive/negative shapes differ")

    if params is None:
        params = ResMlpParams.init(in_dim=A.shape[1], seed=seed)
    else:
        params = params.copy()

    rng = np.random.default_rng(seed)
    tensors = params.tensors()
    m = [np.zeros_like(t) for t in tensors]
    v = [np.zeros_like(t) for t in tensors]

    n_samples = A.shape[0]
    steps_per_epoch = max(1, (n_samples + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    history = {"train_loss": [], "val_loss": []}
    step = 0
    adam_t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n_samples)
        epoch_losses = []
        for start in range(0, n_samples, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_loss_and_param_grads(
                params, A[idx], P[idx], N[idx], config.margin)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at step {step}")
            epoch_losses.append(loss)
            lr_t = lr_schedule(step, total_steps, config.lr, config.warmup_frac)
            adam_t += 1
            for t, g, mi, vi in zip(tensors, grads, m, v):
                mi *= config.beta1
                mi += (1 - config.beta1) * g
                vi *= config.beta2
                vi += (1 - config.beta2) * g * g
                m_hat = mi / (1 - config.beta1 ** adam_t)
                v_hat = vi / (1 - config.beta2 ** adam_t)
                t -= lr_t * (m_hat / (np.sqrt(v_hat) + config.eps)
                             + config.weight_decay * t)
            step += 1
        history["train_loss"].append(float(np.mean(epoch_losses)))
        if val is not None:
            vA, vP, vN = val
            losses = []
            for start in range(0, vA.shape[0], config.val_batch_size):
                sl = slice(start, start + config.val_batch_size)
                l, _, _, _ = batch_triplet_loss_and_grads(
                    resmlp_forward(params, vA[sl]),
                    resmlp_forward(params, vP[sl]),
                    resmlp_forward(params, vN[sl]), config.margin)
                losses.append(l * (min(vA.shape[0], start + config.val_batch_size) - start))
            history["val_loss"].append(float(np.sum(losses) / vA.shape[0]))
    return params, history


# ---------------------------------------------------------------------------
# Model file I/O (.resmlp): JSON header line + little-endian weight blob in
# declaration order.
# ---------------------------------------------------------------------------

def save_resmlp(params: ResMlpParams, path: str, dtype: str = "<f8") -> None:
    header = {
        "dims": [params.in_dim, params.hidden_dim],
        "block_count": params.block_count,
        "activation": "gelu",
        "dtype": dtype,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for t in params.tensors():
            f.write(np.ascontiguousarray(t, dtype=np.dtype(dtype)).tobytes())


def load_resmlp(path: str) -> ResMlpParams:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        blob = f.read()
    in_dim, hidden = header["dims"]
    blocks = header["block_count"]
    dt = np.dtype(header["dtype"])
    shapes = [(hidden, in_dim), (hidden,)]
    for _ in range(blocks):
        shapes.extend([(hidden, hidden), (hidden,)])
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        arrays.append(arr.astype(np.float64).reshape(shape))
        offset += count * dt.itemsize
    return ResMlpParams(arrays[0], arrays[1], arrays[2::2], arrays[3::2])


# ---------------------------------------------------------------------------
# Surrogate image featurizer
# ---------------------------------------------------------------------------

_projection_cache = {}


def _surrogate_projection(seed: int) -> np.ndarray:
    if seed not in _projection_cache:
        rng = np.random.default_rng(seed)
        _projection_cache[seed] = rng.normal(
            0.0, 1.0 / np.sqrt(98), size=(FEATURE_DIM, 98))
    return _projection_cache[seed]


def surrogate_encode(image: SliceImage, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for a frozen image encoder.

    Partitions the image into a 7x7 grid, takes per-cell mean and standard
    deviation (98 statistics), applies a fixed seeded random projection to
    768 dims, and unit-normalizes.
    """
    px = image.pixels.astype(np.float64)
    H, W = px.shape
    rows = np.linspace(0, H, 8).astype(int)
    cols = np.linspace(0, W, 8).astype(int)
    stats = np.empty(98)
    k = 0
    for i in range(7):
        for j in range(7):
            cell = px[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            stats[k] = cell.mean()
            stats[k + 49] = cell.std()
            k += 1
    feat = _surrogate_projection(seed) @ stats
    norm = np.linalg.norm(feat)
    if norm == 0:
        # constant-zero image maps to a fixed unit vector
        feat = np.zeros(FEATURE_DIM)
        feat[0] = 1.0
        return feat
    return feat / norm


# ---------------------------------------------------------------------------
# Cross-modality projector forward pass
# ---------------------------------------------------------------------------

@dataclass
class ProjectorParams:
    """Two-layer MLP aligning 768-dim visual tokens with a 4096-dim token
    embedding space; GELU after each affine layer."""

    w1: np.ndarray      # (H, 768)
    b1: np.ndarray      # (H,)
    w2: np.ndarray      # (4096, H)
    b2: np.ndarray      # (4096,)

    def __post_init__(self):
        H = self.w1.shape[0]
        if self.b1.shape != (H,) or self.w2.shape[1] != H:
            raise ShapeMismatch("projector shapes inconsistent")
        if self.b2.shape != (self.w2.shape[0],):
            raise ShapeMismatch("projector bias shape")

    @classmethod
    def init(cls, in_dim: int = FEATURE_DIM, hidden: int = 4096,
             out_dim: int = 4096, seed: int = 0) -> "ProjectorParams":
        rng = np.random.default_rng(seed)
        def glorot(fan_out, fan_in):
            s = np.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, s, size=(fan_out, fan_in))
        return cls(glorot(hidden, in_dim), np.zeros(hidden),
                   glorot(out_dim, hidden), np.zeros(out_dim))


def projector_forward(params: ProjectorParams, z: np.ndarray) -> np.ndarray:
    """Row-wise z_v = gelu(W2 @ gelu(W1 @ z_row)); input (tokens, 768)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != params.w1.shape[1]:
        raise ShapeMismatch(f"token matrix shape {z.shape} incompatible")
    h = gelu(z @ params.w1.T + params.b1)
    return gelu(h @ params.w2.T + params.b2)
