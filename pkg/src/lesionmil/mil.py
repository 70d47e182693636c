"""Multiple-instance learning with quantile-relaxed bag rules.

A bag is one subject: a single weak label plus the feature vectors of its
patches.  Two classifier variants are provided:

* ``misvm_q`` - an instance-level SVM trained by alternating label
  imputation.  Each positive bag must keep at least m = n - ceil(q n) + 1
  positive instances, so the classic "at least one positive instance"
  assumption is recovered at q = 1 and stricter fractions are enforced for
  smaller q.  Bag posteriors are the q-quantile of instance posteriors.
* ``miles_q`` - a bag-level model embedding every bag by its q-quantile
  similarity to each training instance, with a sparse L1 logistic model
  selecting discriminative prototype instances.  q = 1 reduces to the
  classic max-similarity embedding.

The quantile of a value multiset is the ascending-sorted element at index
ceil(q n) - 1; all modules share this convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lesionmil.svm import (
    Kernel,
    L1LinearModel,
    Standardization,
    SvmModel,
    decision,
    kernel_matrix,
    l1_linear_train,
    platt_fit,
    sigmoid_posterior,
    smo_train,
)


@dataclass(frozen=True)
class Bag:
    """One subject's instances and weak label (+1/-1).  ``instance_labels``
    carries ground truth on phantom data only."""

    id: str
    label: int
    instances: np.ndarray
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        inst = np.atleast_2d(np.asarray(self.instances, dtype=np.float64))
        if inst.shape[0] < 1:
            raise ValueError(f"bag {self.id}: needs at least one instance")
        if self.label not in (-1, 1):
            raise ValueError(f"bag {self.id}: label must be +1 or -1, got {self.label}")
        inst.flags.writeable = False
        object.__setattr__(self, "instances", inst)
        if self.instance_labels is not None:
            il = np.asarray(self.instance_labels)
            if il.shape != (inst.shape[0],):
                raise ValueError(f"bag {self.id}: instance label count mismatch")
            object.__setattr__(self, "instance_labels", il)

    @property
    def n(self) -> int:
        return self.instances.shape[0]


@dataclass(frozen=True)
class MilDataset:
    bags: tuple[Bag, ...]
    schema_id: str = ""

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise ValueError("dataset needs at least one bag")
        d = bags[0].instances.shape[1]
        if any(b.instances.shape[1] != d for b in bags):
            raise ValueError("all bags must share instance dimensionality")
        object.__setattr__(self, "bags", bags)

    @property
    def n_bags(self) -> int:
        return len(self.bags)

    def has_both_classes(self) -> bool:
        labels = {b.label for b in self.bags}
        return 1 in labels and -1 in labels


@dataclass(frozen=True)
class MilModel:
    """A fitted MIL classifier of either variant.

    miSVM-Q keeps a calibrated SvmModel; MILES-Q keeps the selected
    prototype instances with their sparse weights.  Both standardize
    features with stats fitted on their training instances.
    """

    variant: str
    q: float
    kernel: Kernel
    standardization: Standardization
    svm: SvmModel | None = None
    miles: L1LinearModel | None = None
    prototypes: np.ndarray | None = None
    prototype_weights: np.ndarray | None = None
    converged: bool = True
    n_rounds: int = 0
    train_subjects: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in ("misvm_q", "miles_q"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"quantile must lie in (0, 1], got {self.q}")


def quantile_index(n: int, q: float) -> int:
    """Index into an ascending sort implementing the shared convention
    ceil(q n) - 1 (q = 1 selects the maximum)."""
    if n < 1:
        raise ValueError("empty value set")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    # the small slack keeps ceil() stable when q*n is an integer up to fp error
    return max(math.ceil(q * n - 1e-9), 1) - 1


def quantile_value(values: np.ndarray, q: float) -> float:
    """q-quantile of a real multiset under the shared index convention."""
    values = np.asarray(values, dtype=np.float64).ravel()
    idx = quantile_index(values.size, q)
    return float(np.sort(values)[idx])


def quantile_label(values, q: float) -> int:
    """Bag label from instance labels: +1 iff at least n - ceil(q n) + 1 of
    the values are +1 (the quantile of the sorted labels)."""
    v = quantile_value(np.asarray(values, dtype=np.float64), q)
    return 1 if v > 0 else -1


def min_positive_count(n: int, q: float) -> int:
    """Positives a positive bag of size n must keep for its q-quantile label
    to be +1."""
    return n - quantile_index(n, q)


def _pool(data: MilDataset) -> tuple[np.ndarray, list[slice]]:
    spans, rows = [], 0
    for b in data.bags:
        spans.append(slice(rows, rows + b.n))
        rows += b.n
    X = np.vstack([b.instances for b in data.bags])
    return X, spans


def misvmq_train(
    data: MilDataset,
    kernel: Kernel,
    C: float,
    q: float,
    max_iters: int = 20,
    tol: float = 1e-3,
    gram: np.ndarray | None = None,
) -> MilModel:
    """Alternating instance-label imputation around an SMO-trained SVM.

    Instances in negative bags stay fixed at -1.  Positive-bag instances
    start at +1; after each SVM fit they are relabeled by decision sign and
    then, wherever a positive bag fell below its required positive count,
    the highest-decision instances are flipped back to +1 (ties to the
    lowest index).  Stops at a label fixed point or after ``max_iters``
    rounds (the model is then returned with ``converged=False``).  The
    final decision values are Platt-calibrated against the final labels.

    ``gram`` optionally passes the kernel matrix of the standardized pooled
    training instances.
    """
    if not data.has_both_classes():
        raise ValueError("training needs at least one positive and one negative bag")
    X_raw, spans = _pool(data)
    stand = Standardization.fit(X_raw)
    X = stand.apply(X_raw)
    if gram is None:
        gram = kernel_matrix(kernel, X, X)

    y = np.concatenate([np.full(b.n, float(b.label)) for b in data.bags])
    required = {
        i: min_positive_count(b.n, q) for i, b in enumerate(data.bags) if b.label > 0
    }

    model = None
    converged = False
    rounds = 0
    for rounds in range(1, max_iters + 1):
        model = smo_train(X, y, kernel, C, tol=tol, gram=gram, calibrate=False)
        g = decision(model, X)
        new_y = y.copy()
        for i, span in enumerate(spans):
            if data.bags[i].label < 0:
                continue
            gb = g[span]
            labels = np.where(gb > 0, 1.0, -1.0)
            need = required[i]
            if int((labels > 0).sum()) < need:
                # take the top `need` decisions as positive; stable sort keeps
                # the tie-break at the lowest instance index
                order = np.argsort(-gb, kind="stable")
                labels[:] = -1.0
                labels[order[:need]] = 1.0
            new_y[span] = labels
        if np.array_equal(new_y, y):
            converged = True
            break
        y = new_y

    g = decision(model, X)
    A, B = platt_fit(g, y)
    calibrated = SvmModel(
        kernel=model.kernel, support_vectors=model.support_vectors,
        dual_coef=model.dual_coef, bias=model.bias, C=model.C,
        calibration=(A, B), kkt_residual=model.kkt_residual, n_iter=model.n_iter,
    )
    return MilModel(
        variant="misvm_q", q=q, kernel=kernel, standardization=stand,
        svm=calibrated, converged=converged, n_rounds=rounds,
        train_subjects=tuple(b.id for b in data.bags),
    )


def miles_embedding(
    bags: list[Bag] | tuple[Bag, ...],
    prototypes: np.ndarray,
    kernel: Kernel,
    q: float,
    stand: Standardization,
) -> np.ndarray:
    """Embed bags by the q-quantile of instance-to-prototype similarities.

    Row i column k holds quantile_j k(x_ij, p_k); prototypes are given in
    standardized coordinates, bag instances are standardized here.
    """
    rows = np.empty((len(bags), prototypes.shape[0]))
    for i, b in enumerate(bags):
        K = kernel_matrix(kernel, stand.apply(b.instances), prototypes)
        idx = quantile_index(b.n, q)
        rows[i] = np.sort(K, axis=0)[idx]
    return rows


def milesq_train(data: MilDataset, kernel: Kernel, C: float, q: float) -> MilModel:
    """Bag-level training: quantile-similarity embedding against every
    training instance, then sparse L1 logistic selection of prototypes."""
    if not data.has_both_classes():
        raise ValueError("training needs at least one positive and one negative bag")
    X_raw, _ = _pool(data)
    stand = Standardization.fit(X_raw)
    protos_all = stand.apply(X_raw)
    S = miles_embedding(data.bags, protos_all, kernel, q, stand)
    y = np.array([b.label for b in data.bags], dtype=np.float64)
    linear = l1_linear_train(S, y, C)
    sel = linear.support
    return MilModel(
        variant="miles_q", q=q, kernel=kernel, standardization=stand,
        miles=linear, prototypes=protos_all[sel].copy(),
        prototype_weights=linear.weights[sel].copy(),
        train_subjects=tuple(b.id for b in data.bags),
    )


def predict_instance(m: MilModel, X: np.ndarray) -> np.ndarray:
    """Posterior probability per instance row, in (0, 1)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xs = m.standardization.apply(X)
    if m.variant == "misvm_q":
        A, B = m.svm.calibration
        return sigmoid_posterior(decision(m.svm, Xs), A, B)
    if m.prototypes is None or m.prototypes.shape[0] == 0:
        margins = np.full(X.shape[0], m.miles.bias)
    else:
        K = kernel_matrix(m.kernel, Xs, m.prototypes)
        margins = K @ m.prototype_weights + m.miles.bias
    return sigmoid_posterior(margins, -1.0, 0.0)


def predict_bag(m: MilModel, b: Bag) -> float:
    """Bag posterior: q-quantile of instance posteriors for miSVM-Q, and the
    posterior of the bag's quantile embedding for MILES-Q."""
    if m.variant == "misvm_q":
        post = predict_instance(m, b.instances)
        return quantile_value(post, m.q)
    if m.prototypes is None or m.prototypes.shape[0] == 0:
        margin = m.miles.bias
    else:
        K = kernel_matrix(m.kernel, m.standardization.apply(b.instances), m.prototypes)
        idx = quantile_index(b.n, m.q)
        s = np.sort(K, axis=0)[idx]
        margin = float(s @ m.prototype_weights + m.miles.bias)
    return float(sigmoid_posterior(np.array([margin]), -1.0, 0.0)[0])


def separability(m: MilModel, data: MilDataset) -> float:
    """Difference between the mean instance posterior pooled over positive
    bags and pooled over negative bags.  Lies in [-1, 1]; no instance
    labels are needed."""
    pos_sum = pos_n = neg_sum = neg_n = 0.0
    for b in data.bags:
        post = predict_instance(m, b.instances)
        if b.label > 0:
            pos_sum += post.sum()
            pos_n += b.n
        else:
            neg_sum += post.sum()
            neg_n += b.n
    if pos_n == 0 or neg_n == 0:
        raise ValueError("separability needs both bag classes")
    return pos_sum / pos_n - neg_sum / neg_n


def separability_of_posteriors(pos_posteriors, neg_posteriors) -> float:
    """Separability straight from pooled per-instance posteriors (useful
    when posteriors are already computed)."""
    pos = np.asarray(pos_posteriors, dtype=np.float64).ravel()
    neg = np.asarray(neg_posteriors, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("separability needs both bag classes")
    return float(pos.mean() - neg.mean())
