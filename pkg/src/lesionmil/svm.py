"""Kernel SVM trained with sequential minimal optimization, sigmoid
probability calibration, and an L1-regularized logistic model used for
prototype selection.

The SMO solver works on the usual dual

    max  sum a_i - 1/2 sum_ij a_i a_j y_i y_j K_ij
    s.t. 0 <= a_i <= C,   sum a_i y_i = 0

with maximal-violating-pair working-set selection; ties resolve to the
lowest index so training is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver hits its iteration cap; carries the
    residual reached."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Kernel:
    """Similarity between instances: ``polynomial`` (a.b + 1)^degree with
    degree in {1, 2}, or ``rbf`` exp(-|a-b|^2 / (2 sigma^2)) with sigma > 0."""

    kind: str
    degree: int = 1
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind == "polynomial":
            if self.degree not in (1, 2):
                raise ValueError(f"polynomial degree must be 1 or 2, got {self.degree}")
        elif self.kind == "rbf":
            if not self.sigma > 0:
                raise ValueError(f"rbf sigma must be > 0, got {self.sigma}")
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "polynomial":
            return f"poly(p={self.degree})"
        return f"rbf(sigma={self.sigma:g})"


def kernel_eval(k: Kernel, a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if k.kind == "polynomial":
        return float((a @ b + 1.0) ** k.degree)
    # dividing by sigma first makes scaling (cX, c*sigma) a bitwise no-op
    d2 = float(((a / k.sigma - b / k.sigma) ** 2).sum())
    return float(np.exp(-d2 / 2.0))


def kernel_matrix(k: Kernel, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise kernel values, shape (len(A), len(B))."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if k.kind == "polynomial":
        return (A @ B.T + 1.0) ** k.degree
    An, Bn = A / k.sigma, B / k.sigma
    d2 = (An * An).sum(axis=1)[:, None] + (Bn * Bn).sum(axis=1)[None, :] - 2.0 * (An @ Bn.T)
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-d2 / 2.0)


@dataclass(frozen=True)
class SvmModel:
    """Fitted kernel SVM.  ``dual_coef`` stores a_i * y_i for the support
    vectors; the posterior is 1 / (1 + exp(A g + B)) in the decision value
    g, with (A, B) from Platt fitting."""

    kernel: Kernel
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    C: float
    calibration: tuple[float, float] | None = None
    kkt_residual: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        for name in ("support_vectors", "dual_coef"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def decision(m: SvmModel, X: np.ndarray) -> np.ndarray:
    """Decision values g(x) = sum a_i y_i k(s_i, x) + b for rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if m.support_vectors.size == 0:
        return np.full(X.shape[0], m.bias)
    K = kernel_matrix(m.kernel, X, m.support_vectors)
    return K @ m.dual_coef + m.bias


def posterior(m: SvmModel, X: np.ndarray) -> np.ndarray:
    """Calibrated posterior probabilities, strictly inside (0, 1)."""
    if m.calibration is None:
        raise ValueError("model has no calibration; fit one with platt_fit")
    A, B = m.calibration
    return sigmoid_posterior(decision(m, X), A, B)


def sigmoid_posterior(g: np.ndarray, A: float, B: float) -> np.ndarray:
    z = A * np.asarray(g, dtype=np.float64) + B
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = np.exp(-z[pos]) / (1.0 + np.exp(-z[pos]))
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return np.clip(out, 1e-12, 1.0 - 1e-12)


def smo_train(
    X: np.ndarray,
    y: np.ndarray,
    kernel: Kernel,
    C: float,
    tol: float = 1e-3,
    max_iter: int | None = None,
    gram: np.ndarray | None = None,
    calibrate: bool = True,
) -> SvmModel:
    """Train a soft-margin kernel SVM by SMO.

    ``gram`` may pass a precomputed kernel matrix of X against itself
    (performance hook for callers retraining on fixed instances).  When
    ``calibrate`` is set, a Platt sigmoid is fitted on the training decision
    values.  Raises ConvergenceError if the KKT gap is still above ``tol``
    after the iteration cap.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if X.shape[0] != n:
        raise ValueError("X and y length mismatch")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("need at least one example of each class")
    if gram is None:
        gram = kernel_matrix(kernel, X, X)
    if max_iter is None:
        max_iter = max(200 * n, 20_000)

    alpha = np.zeros(n)
    f = np.zeros(n)  # sum_j a_j y_j K_ij, decision without bias
    eps = 1e-12 * C

    up_mask = lambda: ((y > 0) & (alpha < C - eps)) | ((y < 0) & (alpha > eps))
    low_mask = lambda: ((y < 0) & (alpha < C - eps)) | ((y > 0) & (alpha > eps))

    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        viol = y - f  # -y_i * grad_i
        up, low = up_mask(), low_mask()
        vu = np.where(up, viol, -np.inf)
        vl = np.where(low, viol, np.inf)
        i = int(np.argmax(vu))
        j = int(np.argmin(vl))
        gap = vu[i] - vl[j]
        if gap <= tol:
            break

        eta = gram[i, i] + gram[j, j] - 2.0 * gram[i, j]
        eta = max(eta, 1e-12)
        if y[i] != y[j]:
            L = max(0.0, alpha[j] - alpha[i])
            H = min(C, C + alpha[j] - alpha[i])
        else:
            L = max(0.0, alpha[i] + alpha[j] - C)
            H = min(C, alpha[i] + alpha[j])
        # unconstrained optimum for alpha_j along the feasible line
        aj_new = alpha[j] + y[j] * ((f[i] - y[i]) - (f[j] - y[j])) / eta
        aj_new = min(max(aj_new, L), H)
        ai_new = alpha[i] + y[i] * y[j] * (alpha[j] - aj_new)
        di, dj = ai_new - alpha[i], aj_new - alpha[j]
        if abs(di) < 1e-15 and abs(dj) < 1e-15:
            break  # numerically stuck; gap recorded below
        alpha[i], alpha[j] = ai_new, aj_new
        f += y[i] * di * gram[i] + y[j] * dj * gram[j]

    if gap > tol:
        raise ConvergenceError(
            f"SMO did not reach tol {tol} in {it} iterations (gap {gap:.3e})", float(gap)
        )

    free = (alpha > eps) & (alpha < C - eps)
    viol = y - f
    if np.any(free):
        bias = float(np.mean(viol[free]))
    else:
        up, low = up_mask(), low_mask()
        hi = viol[up].max() if np.any(up) else 0.0
        lo = viol[low].min() if np.any(low) else 0.0
        bias = float((hi + lo) / 2.0)

    sv = alpha > eps
    model = SvmModel(
        kernel=kernel,
        support_vectors=X[sv],
        dual_coef=alpha[sv] * y[sv],
        bias=bias,
        C=C,
        kkt_residual=float(gap),
        n_iter=it,
    )
    if calibrate:
        A, B = platt_fit(f + bias, y)
        model = SvmModel(
            kernel=kernel, support_vectors=X[sv], dual_coef=alpha[sv] * y[sv],
            bias=bias, C=C, calibration=(A, B), kkt_residual=float(gap), n_iter=it,
        )
    return model


def dual_objective(alpha: np.ndarray, y: np.ndarray, gram: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ gram @ ay)


def platt_fit(decisions: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Fit sigmoid parameters (A, B) so that 1/(1+exp(A g + B)) models
    P(y=+1 | g), with the usual smoothed targets (N+ + 1)/(N+ + 2) and
    1/(N- + 2).  Newton iterations with backtracking; deterministic.
    """
    g = np.asarray(decisions, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y > 0).sum())
    n_neg = int((y < 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("platt_fit needs both classes present")
    t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    A, B = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    min_step, sigma_reg = 1e-10, 1e-12

    def nll(a, b):
        z = a * g + b
        # log(1 + exp(-|z|)) + max(z, 0) is -log p for t=1 branch; combine stably
        lse = np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0)
        return float(np.sum(t * lse + (1.0 - t) * (lse - z)))

    fval = nll(A, B)
    for _ in range(100):
        z = A * g + B
        p = np.where(z >= 0, np.exp(-z) / (1 + np.exp(-z)), 1 / (1 + np.exp(z)))
        d1 = t - p  # dNLL/dz
        d2 = p * (1 - p)
        grad_a = float(np.dot(g, d1))
        grad_b = float(d1.sum())
        if abs(grad_a) < 1e-10 and abs(grad_b) < 1e-10:
            break
        h11 = float(np.dot(g * g, d2)) + sigma_reg
        h22 = float(d2.sum()) + sigma_reg
        h12 = float(np.dot(g, d2))
        det = h11 * h22 - h12 * h12
        dA = -(h22 * grad_a - h12 * grad_b) / det
        dB = -(-h12 * grad_a + h11 * grad_b) / det
        gd = grad_a * dA + grad_b * dB
        step = 1.0
        while step >= min_step:
            new_a, new_b = A + step * dA, B + step * dB
            new_f = nll(new_a, new_b)
            if new_f < fval + 1e-4 * step * gd:
                A, B, fval = new_a, new_b, new_f
                break
            step /= 2.0
        else:
            break
    return float(A), float(B)


@dataclass(frozen=True)
class L1LinearModel:
    """Sparse linear classifier from L1-regularized logistic regression.
    Coordinates outside the support hold exact zeros."""

    weights: np.ndarray
    bias: float
    C: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights)

    def margin(self, S: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        return S @ self.weights + self.bias

    def posterior(self, S: np.ndarray) -> np.ndarray:
        return sigmoid_posterior(self.margin(S), -1.0, 0.0)


def l1_objective(w: np.ndarray, b: float, S: np.ndarray, y: np.ndarray, C: float) -> float:
    m = y * (S @ w + b)
    loss = float(np.sum(np.logaddexp(0.0, -m)))
    return loss + np.abs(w).sum() / C


def l1_linear_train(
    S: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float = 1e-6,
    max_sweeps: int = 50_000,
) -> L1LinearModel:
    """Minimize sum of logistic losses plus |w|_1 / C by cyclic coordinate
    descent with soft-thresholding (bias unpenalized).

    Each coordinate step uses the 1/4 curvature bound of the logistic loss,
    which keeps the objective monotonically decreasing.  After an initial
    full sweep the solver iterates over the active set, with full sweeps to
    re-check optimality; converged when no coordinate moves more than
    ``tol``.  Raises ConvergenceError at the sweep cap.
    """
    S = np.asarray(S, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = S.shape
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("need at least one example of each class")
    lam = 1.0 / C
    h = 0.25 * (S * S).sum(axis=0)
    h_b = 0.25 * n

    w = np.zeros(d)
    b = 0.0
    margins = np.zeros(n)  # S @ w + b

    def grad_residuals():
        # p_i - t_i with t = 1 for positives, using current margins
        p = np.where(margins >= 0, 1 / (1 + np.exp(-margins)), np.exp(margins) / (1 + np.exp(margins)))
        return p - (y > 0)

    def sweep(coords) -> float:
        nonlocal b
        max_delta = 0.0
        r = grad_residuals()
        gb = r.sum()
        delta_b = -gb / h_b
        if abs(delta_b) > 0:
            b += delta_b
            margins[:] += delta_b
            max_delta = abs(delta_b)
        for jx in coords:
            if h[jx] <= 0:
                continue
            r = grad_residuals()
            gj = float(S[:, jx] @ r)
            u = w[jx] - gj / h[jx]
            new = np.sign(u) * max(abs(u) - lam / h[jx], 0.0)
            delta = new - w[jx]
            if delta != 0.0:
                w[jx] = new
                margins[:] += S[:, jx] * delta
                max_delta = max(max_delta, abs(delta))
        return max_delta

    all_coords = np.arange(d)
    sweeps = 0
    resid = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        resid = sweep(all_coords)
        if resid < tol:
            break
        # inner loop on the active set until it settles
        while sweeps < max_sweeps:
            active = np.flatnonzero(w)
            if active.size == 0:
                break
            sweeps += 1
            if sweep(active) < tol:
                break
    else:
        raise ConvergenceError(
            f"L1 coordinate descent did not converge in {max_sweeps} sweeps "
            f"(last max update {resid:.3e})",
            float(resid),
        )
    return L1LinearModel(weights=w, bias=float(b), C=float(C))


@dataclass(frozen=True)
class Standardization:
    """Per-feature z-scoring stats fitted on training data; zero-variance
    features fall back to unit scale."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        for name in ("mean", "std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardization":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean=X.mean(axis=0), std=std)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std
