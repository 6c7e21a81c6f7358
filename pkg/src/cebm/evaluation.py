"""Representation and density metrics for trained energy models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_io import Dataset
from .expfam import GaussianNaturalParams, gaussian_log_density, natural_to_mean
from .model import BaselineEbm, CebmModel, GmmCebmModel

__all__ = [
    "EncodedSet",
    "OodScores",
    "KnnReport",
    "ProbeResult",
    "CollapseMetrics",
    "MixturePosterior",
    "MetricError",
    "encode_dataset",
    "knn_report",
    "ood_scores",
    "auroc",
    "few_label_probe",
    "posterior_mixture",
    "bias_mixture",
    "aggregate_posterior_estimates",
    "collapse_metrics",
    "collapse_metrics_from_posteriors",
]

_CHUNK = 256


class MetricError(RuntimeError):
    pass


def _images(data) -> np.ndarray:
    return data.images if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)


@dataclass
class EncodedSet:
    codes: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.codes.ndim != 2 or self.codes.shape[0] != self.labels.shape[0]:
            raise ValueError(f"codes {self.codes.shape} do not match labels {self.labels.shape}")
        if not np.all(np.isfinite(self.codes)):
            raise MetricError("non-finite codes")


def _codes(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, CebmModel):
        return natural_to_mean(model.posterior(x)).m1
    if isinstance(model, GmmCebmModel):
        return model.posterior_mean(x)
    if isinstance(model, BaselineEbm):
        return model.features(x)
    raise TypeError(f"cannot encode with {type(model).__name__}")


def encode_dataset(model, data: Dataset, source: str | None = None) -> EncodedSet:
    """Posterior-mean codes (responsibility-weighted for GMM models; trunk features for the baseline)."""
    x = data.images
    codes = np.concatenate([_codes(model, x[i:i + _CHUNK]) for i in range(0, len(x), _CHUNK)])
    return EncodedSet(codes, data.labels, source or f"{model.kind}:{data.name}/{data.split}")


# --------------------------------------------------------------------------
# nearest neighbours


@dataclass
class KnnReport:
    confusion: np.ndarray
    same_class_fraction: float
    k: int
    neighbors: np.ndarray = field(repr=False)
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"metric": "knn", "k": self.k, "same_class_fraction": self.same_class_fraction,
                "degenerate": self.degenerate, "confusion": self.confusion.tolist()}


def knn_report(enc: EncodedSet, k: int = 1, num_classes: int | None = None) -> KnnReport:
    """k-nearest-neighbour label agreement under L2, excluding self matches.

    Row c of the confusion matrix is the distribution of neighbour labels over
    queries with label c.  Ties in distance resolve to the lower index.
    """
    codes, labels = enc.codes, enc.labels
    n = codes.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k + 1:
        raise MetricError(f"need at least k+1 = {k + 1} points, have {n}")
    num_classes = num_classes or int(labels.max()) + 1
    neighbors = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _CHUNK):
        q = codes[start:start + _CHUNK]
        d = np.sum((q[:, None, :] - codes[None, :, :]) ** 2, axis=-1)
        rows = np.arange(q.shape[0])
        d[rows, start + rows] = np.inf
        neighbors[start:start + q.shape[0]] = np.argsort(d, axis=1, kind="stable")[:, :k]
    nlab = labels[neighbors]
    confusion = np.zeros((num_classes, num_classes))
    np.add.at(confusion, (np.repeat(labels, k), nlab.reshape(-1)), 1.0)
    totals = confusion.sum(axis=1, keepdims=True)
    confusion = np.divide(confusion, totals, out=np.zeros_like(confusion), where=totals > 0)
    frac = float(np.mean(nlab == labels[:, None]))
    counts = np.bincount(labels, minlength=num_classes)
    degenerate = bool(np.any((counts > 0) & (counts <= k)))
    return KnnReport(confusion, frac, k, neighbors, degenerate)


# --------------------------------------------------------------------------
# out-of-distribution scores


@dataclass
class OodScores:
    kind: str
    in_scores: np.ndarray
    out_scores: np.ndarray

    def auroc(self) -> float:
        return auroc(self.in_scores, self.out_scores)


def _scores(model, x: np.ndarray, kind: str) -> np.ndarray:
    out = []
    for i in range(0, len(x), _CHUNK):
        chunk = x[i:i + _CHUNK]
        if kind == "log_density":
            out.append(-model.energy(chunk))
        else:
            _, g = model.energy_and_input_grad(chunk)
            out.append(-np.sqrt(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1)))
    scores = np.concatenate(out)
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise MetricError(f"non-finite {kind} score at example {int(bad[0])}")
    return scores


def ood_scores(model, in_data, out_data, kind: str = "log_density") -> OodScores:
    """Per-example scores, oriented so that higher means more in-distribution.

    ``log_density`` is the unnormalized log marginal -E(x); the partition
    function is shared by all inputs and drops out of any ranking.
    ``grad_norm`` is -||dE/dx||.
    """
    if kind not in ("log_density", "grad_norm"):
        raise ValueError(f"unknown OOD score kind {kind!r}")
    return OodScores(kind, _scores(model, _images(in_data), kind), _scores(model, _images(out_data), kind))


def auroc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), by exact pair counting."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs non-empty score vectors")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    wins2 = int(np.sum(2 * below + (at_or_below - below)))
    return wins2 / (2.0 * pos.size * neg.size)


# --------------------------------------------------------------------------
# few-label logistic probe

PROBE_EPOCHS = 500
PROBE_LR = 0.1


@dataclass
class ProbeResult:
    per_class: object
    accuracies: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_json(self) -> dict:
        return {"per_class": self.per_class, "mean": self.mean, "std": self.std,
                "accuracies": list(self.accuracies)}


def _fit_logistic(x: np.ndarray, y: np.ndarray, num_classes: int, epochs: int, lr: float):
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        w -= lr * (x.T @ err)
        b -= lr * err.sum(axis=0)
    return w, b


def few_label_probe(train: EncodedSet, test: EncodedSet, per_class="full", repeats: int = 10,
                    seed: int = 0, epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR) -> ProbeResult:
    """Multinomial logistic regression on frozen codes.

    Each repeat r draws ``per_class`` training codes per class with a stream
    seeded by (seed, r), standardizes features with the drawn set's
    statistics, and runs full-batch gradient descent from zero weights.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    by_class = [np.flatnonzero(train.labels == c) for c in range(num_classes)]
    if per_class != "full":
        per_class = int(per_class)
        smallest = min(len(ix) for ix in by_class)
        if per_class < 1 or per_class > smallest:
            raise MetricError(f"per_class={per_class} impossible; smallest class has {smallest}")
    accs = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        if per_class == "full":
            idx = np.arange(len(train.labels))
        else:
            idx = np.concatenate([rng.choice(ix, per_class, replace=False) for ix in by_class])
        x = train.codes[idx]
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        w, b = _fit_logistic((x - mu) / sd, train.labels[idx], num_classes, epochs, lr)
        pred = np.argmax(((test.codes - mu) / sd) @ w + b, axis=1)
        accs.append(float(np.mean(pred == test.labels)))
    return ProbeResult(per_class, accs)


# --------------------------------------------------------------------------
# posterior collapse: aggregate-posterior KL and mutual information


@dataclass
class MixturePosterior:
    """Per-example mixture of diagonal Gaussians; weights (N, L), params (N, L, K)."""

    log_weights: np.ndarray
    params: GaussianNaturalParams

    def __len__(self):
        return self.log_weights.shape[0]

    def take(self, idx) -> "MixturePosterior":
        return MixturePosterior(self.log_weights[idx],
                                GaussianNaturalParams(self.params.lam1[idx], self.params.lam2[idx]))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        n, l = self.log_weights.shape
        if l == 1:
            comp = np.zeros(n, dtype=np.int64)
        else:
            w = np.exp(self.log_weights - self.log_weights.max(axis=1, keepdims=True))
            cdf = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
            comp = np.minimum((rng.random((n, 1)) > cdf).sum(axis=1), l - 1)
        rows = np.arange(n)
        mean = natural_to_mean(self.params)
        m1 = mean.m1[rows, comp]
        sd = np.sqrt(mean.variance[rows, comp])
        return m1 + sd * rng.standard_normal(m1.shape)


def _mixture_log_density(log_w: np.ndarray, params: GaussianNaturalParams, z: np.ndarray) -> np.ndarray:
    """log sum_l w_l N(z | params_l); log_w (..., L), params (..., L, K), z (..., K)."""
    comp = gaussian_log_density(params, z[..., None, :]) + log_w
    m = comp.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(comp - m), axis=-1, keepdims=True)))[..., 0]


def posterior_mixture(model, x: np.ndarray) -> MixturePosterior:
    if isinstance(model, CebmModel):
        post = model.posterior(x)
        return MixturePosterior(np.zeros((post.lam1.shape[0], 1)),
                                GaussianNaturalParams(post.lam1[:, None], post.lam2[:, None]))
    if isinstance(model, GmmCebmModel):
        probs, post = model.component_posterior(x)
        with np.errstate(divide="ignore"):
            return MixturePosterior(np.log(probs), post)
    raise TypeError(f"{type(model).__name__} has no latent posterior")


def bias_mixture(model) -> tuple:
    """(log weights (L,), params (L, K)) of the bias p_lam(z)."""
    if isinstance(model, CebmModel):
        b = model.bias
        return np.zeros(1), GaussianNaturalParams(b.lam1[None], b.lam2[None])
    comps = model.components()
    return np.full(comps.lam1.shape[0], -math.log(comps.lam1.shape[0])), comps


def aggregate_posterior_estimates(post: MixturePosterior, bias_log_w, bias: GaussianNaturalParams,
                                  z: np.ndarray) -> tuple:
    """KL(q_hat || p_lam) and I(x; z) estimates from one draw z_n ~ p(z | x_n).

    q_hat(z) = (1/M) sum_m p(z | x_m) over the M examples in ``post``.
    """
    m = len(post)
    log_q = np.empty(m)
    for start in range(0, m, 32):
        zc = z[start:start + 32]
        cross = _mixture_log_density(post.log_weights[None], GaussianNaturalParams(
            post.params.lam1[None], post.params.lam2[None]), zc[:, None, :])  # (c, M)
        top = cross.max(axis=1)
        log_q[start:start + 32] = top + np.log(np.mean(np.exp(cross - top[:, None]), axis=1))
    log_own = _mixture_log_density(post.log_weights, post.params, z)
    log_bias = _mixture_log_density(np.asarray(bias_log_w), bias, z)
    kl_terms = log_q - log_bias
    mi_terms = log_own - log_q
    if not np.all(np.isfinite(kl_terms)):
        raise MetricError("non-finite KL term (aggregate posterior vs bias)")
    if not np.all(np.isfinite(mi_terms)):
        raise MetricError("non-finite MI term (posterior vs aggregate posterior)")
    return float(np.mean(kl_terms)), float(np.mean(mi_terms))


@dataclass
class CollapseMetrics:
    kl: float
    mi: float
    kl_std: float
    mi_std: float
    batch_size: int
    resamples: int

    def to_json(self) -> dict:
        return {"metric": "collapse", "kl_aggregate_to_bias": self.kl, "mutual_information": self.mi,
                "kl_std": self.kl_std, "mi_std": self.mi_std, "mc_batch": self.batch_size,
                "resamples": self.resamples}


def collapse_metrics_from_posteriors(post: MixturePosterior, bias_log_w, bias: GaussianNaturalParams,
                                     rng: np.random.Generator, mc_batch: int = 1000,
                                     resamples: int = 5) -> CollapseMetrics:
    """Average KL / MI estimates over ``resamples`` Monte Carlo batches.

    With N <= mc_batch every batch is the full data set (only z is redrawn).
    """
    n = len(post)
    m = min(mc_batch, n)
    kls, mis = [], []
    for _ in range(resamples):
        batch = post if m == n else post.take(np.sort(rng.choice(n, m, replace=False)))
        z = batch.sample(rng)
        kl, mi = aggregate_posterior_estimates(batch, bias_log_w, bias, z)
        kls.append(kl)
        mis.append(mi)
    return CollapseMetrics(float(np.mean(kls)), float(np.mean(mis)), float(np.std(kls)),
                           float(np.std(mis)), m, resamples)


def collapse_metrics(model, data, rng: np.random.Generator, mc_batch: int = 1000,
                     resamples: int = 5) -> CollapseMetrics:
    x = _images(data)
    parts = [posterior_mixture(model, x[i:i + _CHUNK]) for i in range(0, len(x), _CHUNK)]
    post = MixturePosterior(
        np.concatenate([p.log_weights for p in parts]),
        GaussianNaturalParams(np.concatenate([p.params.lam1 for p in parts]),
                              np.concatenate([p.params.lam2 for p in parts])),
    )
    log_w, bias = bias_mixture(model)
    return collapse_metrics_from_posteriors(post, log_w, bias, rng, mc_batch, resamples)
