"""Hierarchical semantic-ID quantization.

Items arrive as fixed-dimension embeddings and leave as L-level code paths
(coarse to fine). Two variants are provided:

* a residual k-means quantizer: per-level codebooks fitted by Lloyd's
  algorithm on the residual stream (the "frozen" tokenizer), and
* a trained refinement of it: the k-means codebooks seed a model with an
  affine encoder carrying a residual connection, an affine decoder, and a
  VQ-style loss (reconstruction + codebook + commitment) whose gradients
  are fully analytic. Training adapts codebooks and the affine maps while
  a straight-through estimator carries reconstruction gradients across the
  discrete selection.

Code-quality metrics (collision rate, level-1 code usage, mean within-path
embedding similarity) live here too, next to the assignments they score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError, NumericalFailureError

CodePath = tuple[int, ...]

_LLOYD_MAX_ITER = 100
_LLOYD_REL_TOL = 1e-7


@dataclass(frozen=True)
class EmbeddingCorpus:
    """Item embeddings with opaque ids; all vectors share one dimension."""

    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2:
            raise InvalidInputError("corpus vectors must be a 2-D array")
        if len(self.ids) != vecs.shape[0]:
            raise InvalidInputError("corpus ids and vectors disagree on item count")
        if len(set(self.ids)) != len(self.ids):
            raise InvalidInputError("corpus contains duplicate item ids")
        if not np.all(np.isfinite(vecs)):
            raise InvalidInputError("corpus contains non-finite components")
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RqModel:
    """Residual quantizer with affine encoder/decoder around the codebooks.

    encode(x) = w_enc @ x + b_enc + x (residual connection keeps the early
    latent distribution close to the input); decode(q) = w_dec @ q + b_dec.
    """

    w_enc: np.ndarray
    b_enc: np.ndarray
    codebooks: tuple[np.ndarray, ...]
    w_dec: np.ndarray
    b_dec: np.ndarray
    beta: float = 0.25

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise InvalidInputError("commitment coefficient beta must be > 0")
        d = self.w_enc.shape[0]
        if self.w_enc.shape != (d, d) or self.w_dec.shape != (d, d):
            raise InvalidInputError("encoder/decoder matrices must be d x d")
        if self.b_enc.shape != (d,) or self.b_dec.shape != (d,):
            raise InvalidInputError("encoder/decoder biases must have dimension d")
        for cb in self.codebooks:
            if cb.ndim != 2 or cb.shape[1] != d or cb.shape[0] < 1:
                raise InvalidInputError("codebook levels must be (K_l, d) with K_l >= 1")
            if not np.all(np.isfinite(cb)):
                raise InvalidInputError("codebook contains non-finite centroids")

    @property
    def dim(self) -> int:
        return int(self.w_enc.shape[0])

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(int(cb.shape[0]) for cb in self.codebooks)

    def encode_inputs(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w_enc.T + self.b_enc + x

    def decode_latents(self, q: np.ndarray) -> np.ndarray:
        return q @ self.w_dec.T + self.b_dec


def kmeans_fit(
    x: np.ndarray,
    k: int,
    seed: int,
    return_history: bool = False,
) -> np.ndarray | tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding; deterministic for a seed.

    Stops after 100 iterations or when the relative distortion drop falls
    below 1e-7. Empty clusters are re-seeded from the point farthest from
    its assigned centroid, which keeps distortion non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("kmeans_fit requires a non-empty (n, d) array")
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidInputError(f"k must satisfy 1 <= k <= n (got k={k}, n={n})")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_seed(x, k, rng)

    history: list[float] = []
    prev = math.inf
    for _ in range(_LLOYD_MAX_ITER):
        assign, dists = _assign(x, centroids)
        distortion = float(dists.mean())
        if history:
            # Lloyd monotonicity; tiny slack for float accumulation only.
            assert distortion <= history[-1] * (1 + 1e-12) + 1e-12
        history.append(distortion)

        new_centroids = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
        empty = [j for j in range(k) if not (assign == j).any()]
        if empty:
            new_centroids = _reseed_empty(x, new_centroids, assign, empty)
        centroids = new_centroids

        if prev - distortion < _LLOYD_REL_TOL * max(prev, 1e-300):
            break
        prev = distortion

    if return_history:
        return centroids, history
    return centroids


def _kmeans_pp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = _sq_dists_to(x, centroids[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, _sq_dists_to(x, centroids[j]))
    return centroids


def _sq_dists_to(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x - c
    return np.einsum("nd,nd->n", diff, diff)


def _assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (exact squared distances, ties -> lowest index)."""
    n, d = x.shape
    k = centroids.shape[0]
    chunk = max(1, 8_000_000 // max(1, k * d))
    assign = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        block = x[lo : lo + chunk]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign[lo : lo + chunk] = d2.argmin(axis=1)
        best[lo : lo + chunk] = d2.min(axis=1)
    return assign, best


def _reseed_empty(
    x: np.ndarray, centroids: np.ndarray, assign: np.ndarray, empty: list[int]
) -> np.ndarray:
    # Rank points by distance to their (just updated) assigned centroid and
    # hand the farthest ones to the empty clusters.
    diff = x - centroids[assign]
    dists = np.einsum("nd,nd->n", diff, diff)
    order = np.argsort(-dists, kind="stable")
    for slot, j in enumerate(empty):
        centroids[j] = x[order[slot % len(order)]]
    return centroids


def rq_encode(vector: np.ndarray, codebooks: tuple[np.ndarray, ...]) -> tuple[CodePath, np.ndarray]:
    """Greedy residual encoding of one vector.

    At each level the centroid nearest to the running residual is selected
    (ties toward the lowest code index) and subtracted; the reconstruction
    is the sum of selections.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError("rq_encode expects a 1-D vector")
    d = codebooks[0].shape[1]
    if v.shape[0] != d:
        raise InvalidInputError(f"vector dimension {v.shape[0]} does not match codebook dimension {d}")
    codes, recon = rq_encode_batch(v[None, :], codebooks)
    return tuple(int(c) for c in codes[0]), recon[0]


def rq_encode_batch(
    x: np.ndarray, codebooks: tuple[np.ndarray, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized greedy residual encoding; returns (n, L) codes and (n, d) reconstructions."""
    x = np.asarray(x, dtype=np.float64)
    d = codebooks[0].shape[1]
    if x.ndim != 2 or x.shape[1] != d:
        raise InvalidInputError("rq_encode_batch expects (n, d) matching the codebooks")
    n = x.shape[0]
    codes = np.empty((n, len(codebooks)), dtype=np.int64)
    residual = x.copy()
    for lvl, cb in enumerate(codebooks):
        chunk = max(1, 8_000_000 // max(1, cb.shape[0] * d))
        for lo in range(0, n, chunk):
            block = residual[lo : lo + chunk]
            d2 = ((block[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
            idx = d2.argmin(axis=1)
            codes[lo : lo + chunk, lvl] = idx
            residual[lo : lo + chunk] = block - cb[idx]
    return codes, x - residual


def residual_kmeans_codebooks(
    x: np.ndarray, level_sizes: tuple[int, ...] | list[int], seed: int
) -> tuple[np.ndarray, ...]:
    """Per-level k-means on the residual stream (the frozen tokenizer)."""
    x = np.asarray(x, dtype=np.float64)
    codebooks: list[np.ndarray] = []
    residual = x.copy()
    for lvl, k in enumerate(level_sizes):
        cb = kmeans_fit(residual, int(k), seed + lvl)
        assign, _ = _assign(residual, cb)
        residual = residual - cb[assign]
        codebooks.append(cb)
    return tuple(codebooks)


def rq_model_init(
    corpus: EmbeddingCorpus, level_sizes: tuple[int, ...] | list[int], seed: int, beta: float = 0.25
) -> RqModel:
    """Seed a trainable model from residual k-means codebooks.

    The encoder starts as the identity map (w_enc = 0 plus the residual
    connection) and the decoder as the identity, so the initial assignments
    coincide with the frozen residual k-means tokenizer.
    """
    if len(corpus) == 0:
        raise InvalidInputError("cannot initialize from an empty corpus")
    for k in level_sizes:
        if int(k) > len(corpus):
            raise InvalidInputError(f"level size {k} exceeds corpus size {len(corpus)}")
    d = corpus.dim
    codebooks = residual_kmeans_codebooks(corpus.vectors, level_sizes, seed)
    return RqModel(
        w_enc=np.zeros((d, d)),
        b_enc=np.zeros(d),
        codebooks=codebooks,
        w_dec=np.eye(d),
        b_dec=np.zeros(d),
        beta=float(beta),
    )


@dataclass(frozen=True)
class RqStructure:
    """Frozen forward-pass structure: code selections and stop-gradient values.

    Holding these fixed makes the loss a smooth function of the parameters,
    which is what the analytic gradients differentiate (and what a finite-
    difference oracle must perturb around).
    """

    codes: np.ndarray        # (n, L) selected indices
    enc0: np.ndarray         # (n, d) encoder outputs
    residuals0: np.ndarray   # (n, L, d) residual entering each level
    selected0: np.ndarray    # (n, L, d) selected centroid values
    quantized0: np.ndarray   # (n, d) sum of selections


def rq_structure(model: RqModel, x: np.ndarray) -> RqStructure:
    x = np.asarray(x, dtype=np.float64)
    e = model.encode_inputs(x)
    n, d = e.shape
    L = len(model.codebooks)
    codes = np.empty((n, L), dtype=np.int64)
    residuals = np.empty((n, L, d))
    selected = np.empty((n, L, d))
    r = e.copy()
    for lvl, cb in enumerate(model.codebooks):
        d2 = ((r[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
        idx = d2.argmin(axis=1)
        codes[:, lvl] = idx
        residuals[:, lvl] = r
        selected[:, lvl] = cb[idx]
        r = r - cb[idx]
    return RqStructure(codes, e, residuals, selected, selected.sum(axis=1))


def rq_loss(
    model: RqModel, batch: EmbeddingCorpus, structure: RqStructure | None = None
) -> tuple[dict[str, float], RqStructure]:
    """Loss components (reconstruction, codebook, commitment), batch means.

    With `structure` given, the stop-gradient values and code selections are
    held at the supplied snapshot; this is the function the analytic
    gradients differentiate exactly.
    """
    x = batch.vectors
    if structure is None:
        structure = rq_structure(model, x)
    e = model.encode_inputs(x)
    n = x.shape[0]
    L = len(model.codebooks)

    # Residual chain with frozen subtractions; commitment pulls the encoder
    # toward the (frozen) selections.
    commit = 0.0
    r = e
    for lvl in range(L):
        diff = r - structure.selected0[:, lvl]
        commit += float((diff**2).sum())
        r = r - structure.selected0[:, lvl]
    commit *= model.beta / n

    # Codebook term pulls selected centroids toward the frozen residuals.
    code_loss = 0.0
    for lvl, cb in enumerate(model.codebooks):
        sel = cb[structure.codes[:, lvl]]
        code_loss += float(((structure.residuals0[:, lvl] - sel) ** 2).sum())
    code_loss /= n

    # Straight-through: the decoder sees e plus the frozen offset, so the
    # reconstruction gradient reaches the encoder unchanged.
    q_st = e + (structure.quantized0 - structure.enc0)
    xhat = model.decode_latents(q_st)
    recon = float(((x - xhat) ** 2).sum()) / n

    components = {"reconstruction": recon, "codebook": code_loss, "commitment": commit}
    for name, value in components.items():
        if not math.isfinite(value):
            raise NumericalFailureError(f"non-finite {name} loss")
    return components, structure


def rq_gradients(
    model: RqModel, batch: EmbeddingCorpus
) -> tuple[dict[str, float], dict[str, np.ndarray | list[np.ndarray]], RqStructure]:
    """Analytic gradients of rq_loss at the current parameters."""
    x = batch.vectors
    structure = rq_structure(model, x)
    components, _ = rq_loss(model, batch, structure)
    n = x.shape[0]
    L = len(model.codebooks)
    e = structure.enc0

    q_st = structure.quantized0
    xhat = model.decode_latents(q_st)
    g_xhat = 2.0 * (xhat - x) / n                      # (n, d)

    grad_w_dec = g_xhat.T @ q_st
    grad_b_dec = g_xhat.sum(axis=0)
    grad_e = g_xhat @ model.w_dec                      # straight-through path

    # Commitment: sum_l (r_l - c_l) = residual after the last level,
    # telescoped; each r_l sees the encoder with unit Jacobian.
    for lvl in range(L):
        grad_e = grad_e + (2.0 * model.beta / n) * (
            structure.residuals0[:, lvl] - structure.selected0[:, lvl]
        )

    grad_w_enc = grad_e.T @ x
    grad_b_enc = grad_e.sum(axis=0)

    grad_codebooks: list[np.ndarray] = []
    for lvl, cb in enumerate(model.codebooks):
        g = np.zeros_like(cb)
        diff = (2.0 / n) * (structure.selected0[:, lvl] - structure.residuals0[:, lvl])
        np.add.at(g, structure.codes[:, lvl], diff)
        grad_codebooks.append(g)

    grads = {
        "w_enc": grad_w_enc,
        "b_enc": grad_b_enc,
        "w_dec": grad_w_dec,
        "b_dec": grad_b_dec,
        "codebooks": grad_codebooks,
    }
    return components, grads, structure


def rq_train_step(
    model: RqModel, batch: EmbeddingCorpus, lr: float
) -> tuple[RqModel, dict[str, float]]:
    """One analytic gradient-descent step on the VQ-style loss."""
    if lr < 0:
        raise InvalidInputError("learning rate must be >= 0")
    if batch.dim != model.dim:
        raise InvalidInputError("batch dimension does not match model")
    components, grads, _ = rq_gradients(model, batch)
    if lr == 0:
        return model, components
    new_model = replace(
        model,
        w_enc=model.w_enc - lr * grads["w_enc"],
        b_enc=model.b_enc - lr * grads["b_enc"],
        w_dec=model.w_dec - lr * grads["w_dec"],
        b_dec=model.b_dec - lr * grads["b_dec"],
        codebooks=tuple(
            cb - lr * g for cb, g in zip(model.codebooks, grads["codebooks"])
        ),
    )
    return new_model, components


def rq_train(
    model: RqModel,
    corpus: EmbeddingCorpus,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> tuple[RqModel, list[dict[str, float]]]:
    """Minibatch training loop over seeded shuffles; returns the loss trace."""
    rng = np.random.default_rng(seed)
    n = len(corpus)
    trace: list[dict[str, float]] = []
    order = np.array([], dtype=np.int64)
    for _ in range(steps):
        if order.size < batch_size:
            order = rng.permutation(n)
        take, order = order[:batch_size], order[batch_size:]
        batch = EmbeddingCorpus(
            tuple(corpus.ids[i] for i in take), corpus.vectors[take]
        )
        model, components = rq_train_step(model, batch, lr)
        trace.append(components)
    return model, trace


def model_assignments(model: RqModel, corpus: EmbeddingCorpus) -> dict[str, CodePath]:
    """Code paths for every corpus item under the model's encoder + codebooks."""
    e = model.encode_inputs(corpus.vectors)
    codes, _ = rq_encode_batch(e, model.codebooks)
    return {item: tuple(int(c) for c in row) for item, row in zip(corpus.ids, codes)}


def codebook_assignments(
    codebooks: tuple[np.ndarray, ...], corpus: EmbeddingCorpus
) -> dict[str, CodePath]:
    """Code paths under frozen codebooks (no encoder)."""
    codes, _ = rq_encode_batch(corpus.vectors, codebooks)
    return {item: tuple(int(c) for c in row) for item, row in zip(corpus.ids, codes)}


def metric_collision(assignments: dict[str, CodePath]) -> float:
    """Fraction of items whose full code path is shared with another item."""
    if not assignments:
        raise InvalidInputError("collision metric needs a non-empty assignment map")
    counts: dict[CodePath, int] = {}
    for path in assignments.values():
        counts[path] = counts.get(path, 0) + 1
    collided = sum(c for c in counts.values() if c >= 2)
    return collided / len(assignments)


def metric_cur_l1(assignments: dict[str, CodePath], k1: int) -> float:
    """Share of level-1 codes actually used."""
    if k1 < 1:
        raise InvalidInputError("k1 must be >= 1")
    used = {path[0] for path in assignments.values()}
    if any(code >= k1 or code < 0 for code in used):
        raise InvalidInputError("assignment contains a level-1 code outside [0, k1)")
    return len(used) / k1


def metric_pas(assignments: dict[str, CodePath], corpus: EmbeddingCorpus) -> float:
    """Mean pairwise cosine similarity within collided paths.

    Paths with fewer than two items are excluded; if no path collides the
    metric is 1.0 by convention (vacuously coherent collisions).
    """
    index = {item: i for i, item in enumerate(corpus.ids)}
    groups: dict[CodePath, list[int]] = {}
    for item, path in assignments.items():
        groups.setdefault(path, []).append(index[item])

    means = []
    for members in groups.values():
        if len(members) < 2:
            continue
        vecs = corpus.vectors[members]
        norms = np.linalg.norm(vecs, axis=1)
        if np.any(norms == 0):
            raise InvalidInputError("zero vector inside a collided code group")
        unit = vecs / norms[:, None]
        sims = unit @ unit.T
        m = len(members)
        upper = sims[np.triu_indices(m, k=1)]
        means.append(float(upper.mean()))
    if not means:
        return 1.0
    return float(np.mean(means))
