"""Training losses: contrastive pair losses, cross entropy, focal Tversky.

Each loss has a graph builder (emits tape nodes, used by the training
loops and by gradient checks) and a plain numeric entry point that builds
a one-off tape and runs it, so there is a single source of truth for the
formulas.

Contrastive batches hold 2N projection views: every original item
contributes two augmented views, and ``pair`` maps each view to its
partner. Cosine similarities are taken after an explicit l2
normalization, so scaling all projections by a positive constant leaves
the losses unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Ref, Tape, forward

log = logging.getLogger(__name__)

# Finite stand-in for "excluded from the row"; exp(x - max) underflows to
# exactly 0.0 for excluded entries, so masked log-sum-exp stays exact.
_MASK_OFF = -1e30


@dataclass
class TverskyParams:
    """Focal Tversky knobs: ``alpha`` weights misses vs false alarms."""

    alpha: float = 0.9
    gamma: float = 2.0
    eps: float = 1e-7

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class ProjBatch:
    """2N projection views with an explicit view pairing.

    ``z`` is (2N, d) with unit rows (tolerance 1e-9), ``pair[i]`` is the
    index of view i's partner (a perfect matching), ``labels`` holds the
    originating item's class per view (or None when unlabeled).
    """

    z: np.ndarray
    pair: np.ndarray
    labels: np.ndarray | None
    tau: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.pair = np.asarray(self.pair, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.z.shape[0]
        if self.z.ndim != 2 or n < 2 or n % 2:
            raise ValueError(f"z must be (2N, d) with N >= 1, got {self.z.shape}")
        norms = np.sqrt((self.z * self.z).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("projection rows must be unit length within 1e-9")
        if self.pair.shape != (n,) or np.any(self.pair[self.pair] != np.arange(n)) or np.any(self.pair == np.arange(n)):
            raise ValueError("pair must be a perfect matching without fixed points")
        if self.labels is not None and self.labels.shape != (n,):
            raise ValueError("labels must give one class per view")
        if not self.tau > 0.0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def _masked_lse(tape: Tape, s: Ref, n: int) -> Ref:
    """Row-wise log-sum-exp of ``s`` excluding the diagonal, (n, 1)."""
    off_diag = tape.const(np.eye(n) * _MASK_OFF)
    sm = s + off_diag
    m = tape.reduce_max(sm, axis=1, keepdims=True)
    e = tape.exp(sm - m)
    return m + tape.log(tape.reduce_sum(e, axis=1, keepdims=True))


def _similarities(tape: Tape, z: Ref, tau: float) -> Ref:
    zn = tape.l2_normalize(z, axis=1)
    return tape.matmul(zn, zn, transpose_b=True) * (1.0 / tau)


def nt_xent_graph(tape: Tape, z: Ref, pair: np.ndarray, tau: float) -> Ref:
    """Normalized temperature-scaled cross entropy over paired views.

    Mean over all 2N anchors of -log( exp(sim(z_i, z_pair)/tau) /
    sum_{j != i} exp(sim(z_i, z_j)/tau) ).
    """
    n = pair.shape[0]
    s = _similarities(tape, z, tau)
    lse = _masked_lse(tape, s, n)
    pair_onehot = np.zeros((n, n))
    pair_onehot[np.arange(n), pair] = 1.0
    pos = tape.reduce_sum(s * tape.const(pair_onehot), axis=1, keepdims=True)
    return tape.reduce_mean(lse - pos)


def positive_sets(pair: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """P(i) membership matrix: views sharing anchor i's label, excluding i."""
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same


def sup_con_graph(tape: Tape, z: Ref, pair: np.ndarray, labels: np.ndarray, tau: float) -> Ref:
    """Supervised contrastive loss over all same-label view pairs.

    Per anchor: -(1/|P(i)|) sum_{p in P(i)} log( exp(sim(z_i, z_p)/tau)
    / sum_{j != i} exp(sim(z_i, z_j)/tau) ), averaged over anchors.
    Anchors with empty P(i) contribute zero and are flagged.
    """
    n = pair.shape[0]
    pos = positive_sets(pair, labels)
    counts = pos.sum(axis=1).astype(np.float64)
    if np.any(counts == 0):
        log.warning("sup_con: %d anchor(s) with no positives contribute zero", int((counts == 0).sum()))
    weights = np.where(counts[:, None] > 0, pos / np.maximum(counts[:, None], 1.0), 0.0)
    has_pos = (counts > 0).astype(np.float64)[:, None]
    s = _similarities(tape, z, tau)
    lse = _masked_lse(tape, s, n)
    mean_pos = tape.reduce_sum(s * tape.const(weights), axis=1, keepdims=True)
    return tape.reduce_mean(tape.const(has_pos) * (lse - mean_pos))


def cross_entropy_logits_graph(tape: Tape, logits: Ref, labels: np.ndarray, n_classes: int) -> Ref:
    """Mean negative log-likelihood from logits via stable log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((labels.shape[0], n_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    m = tape.reduce_max(logits, axis=1, keepdims=True)
    lse = m + tape.log(tape.reduce_sum(tape.exp(logits - m), axis=1, keepdims=True))
    true_logit = tape.reduce_sum(logits * tape.const(onehot), axis=1, keepdims=True)
    return tape.reduce_mean(lse - true_logit)


def focal_tversky_graph(tape: Tape, probs: Ref, labels: np.ndarray, params: TverskyParams) -> Ref:
    """Focal Tversky loss over a batch of probabilities.

    Soft counts TP = sum(p*g), FN = sum((1-p)*g), FP = sum(p*(1-g)), the
    Tversky index TI = TP / (TP + alpha*FN + (1-alpha)*FP + eps), and the
    focal exponent: loss = (1 - TI) ** (1/gamma).
    """
    params.validate()
    g = np.asarray(labels, dtype=np.float64)
    g_ref = tape.const(g)
    tp = tape.reduce_sum(probs * g_ref)
    fn = tape.reduce_sum((1.0 - probs) * g_ref)
    fp = tape.reduce_sum(probs * tape.const(1.0 - g))
    den = tp + params.alpha * fn + (1.0 - params.alpha) * fp + params.eps
    ti = tp / den
    return tape.power(1.0 - ti, 1.0 / params.gamma)


def focal_tversky_symmetric_graph(tape: Tape, probs: Ref, labels: np.ndarray,
                                  params: TverskyParams) -> Ref:
    """Focal Tversky summed over both class channels.

    The Tversky index is defined per class; for binary targets the
    negative channel evaluates the same formula on (1 - p, 1 - g).  The
    single-channel form with alpha near 1 penalizes missed positives
    almost exclusively, so its gradient keeps whatever ranking direction
    the initialization happened to produce; the channel sum restores the
    counter-pressure on false positives and makes training direction-
    stable.
    """
    g = np.asarray(labels, dtype=np.float64)
    pos = focal_tversky_graph(tape, probs, g, params)
    neg = focal_tversky_graph(tape, 1.0 - probs, 1.0 - g, params)
    return pos + neg


# ---------------------------------------------------------------------------
# numeric entry points
# ---------------------------------------------------------------------------


def cosine_sim(u, v) -> float:
    """Cosine similarity of two vectors; zero vectors are rejected."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def nt_xent(batch: ProjBatch) -> float:
    tape = Tape()
    z = tape.input("z")
    nt_xent_graph(tape, z, batch.pair, batch.tau)
    return forward(tape, {"z": batch.z}).item()


def sup_con(batch: ProjBatch) -> float:
    if batch.labels is None:
        raise ValueError("sup_con requires labels on the batch")
    tape = Tape()
    z = tape.input("z")
    sup_con_graph(tape, z, batch.pair, batch.labels, batch.tau)
    return forward(tape, {"z": batch.z}).item()


def multi_task(l_c: float, l_ce: float, alpha_c: float = 1.0, alpha_ce: float = 0.5) -> float:
    """Weighted sum of a contrastive and a cross-entropy term."""
    if alpha_c < 0.0 or alpha_ce < 0.0:
        raise ValueError("multi_task weights must be non-negative")
    return alpha_c * l_c + alpha_ce * l_ce


def cross_entropy(probs, labels) -> float:
    """Mean NLL of integer labels under rows of class probabilities.

    A zero probability at the true class is clamped at 1e-12 and flagged.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ValueError(f"need (N, C) probs and (N,) labels, got {p.shape} and {y.shape}")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    true_p = p[np.arange(p.shape[0]), y]
    if np.any(true_p == 0.0):
        log.warning("cross_entropy: zero probability at the true class, clamping at 1e-12")
        true_p = np.maximum(true_p, 1e-12)
    return float(-np.mean(np.log(true_p)))


def focal_tversky(probs, labels, params: TverskyParams | None = None) -> float:
    params = params or TverskyParams()
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    g = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ValueError(f"probs and labels differ in length: {p.shape} vs {g.shape}")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.all(np.isin(g, (0.0, 1.0))):
        raise ValueError("labels must be binary")
    tape = Tape()
    probs_ref = tape.input("p")
    focal_tversky_graph(tape, probs_ref, g, params)
    return forward(tape, {"p": p}).item()


def focal_tversky_symmetric(probs, labels, params: TverskyParams | None = None) -> float:
    """Numeric twin of the class-summed focal Tversky objective."""
    params = params or TverskyParams()
    return focal_tversky(probs, labels, params) + focal_tversky(
        1.0 - np.asarray(probs, dtype=np.float64),
        1.0 - np.asarray(labels, dtype=np.float64), params)
