import math

import numpy as np
import pytest

from lesionmil.svm import (
    ConvergenceError,
    Kernel,
    Standardization,
    decision,
    dual_objective,
    kernel_eval,
    kernel_matrix,
    l1_linear_train,
    l1_objective,
    platt_fit,
    posterior,
    sigmoid_posterior,
    smo_train,
)


class TestKernel:
    def test_rbf_self_similarity(self):
        k = Kernel("rbf", sigma=3.0)
        a = np.array([1.0, 2.0, 3.0])
        assert kernel_eval(k, a, a) == 1.0

    def test_poly_orthogonal(self):
        k = Kernel("polynomial", degree=1)
        assert kernel_eval(k, np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_rbf_formula(self):
        k = Kernel("rbf", sigma=8.0)
        a = np.zeros(4)
        b = np.array([8.0, 0.0, 0.0, 0.0])
        assert kernel_eval(k, a, b) == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            kernel_eval(Kernel("rbf", sigma=1.0), np.zeros(3), np.zeros(4))

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            Kernel("polynomial", degree=3)
        with pytest.raises(ValueError):
            Kernel("rbf", sigma=0.0)
        with pytest.raises(ValueError):
            Kernel("sigmoid")

    def test_gram_psd_smoke(self, rng):
        X = rng.normal(0, 1, (25, 6))
        for k in (Kernel("rbf", sigma=2.0), Kernel("polynomial", degree=2)):
            G = kernel_matrix(k, X, X)
            assert np.linalg.eigvalsh(G).min() >= -1e-8 * max(1.0, np.abs(G).max())

    def test_rbf_scaling_exactness(self, rng):
        # power-of-two feature scaling with matching sigma scaling gives the
        # bit-identical Gram matrix
        X = rng.normal(0, 1, (12, 5))
        g1 = kernel_matrix(Kernel("rbf", sigma=3.0), X, X)
        g2 = kernel_matrix(Kernel("rbf", sigma=12.0), 4.0 * X, 4.0 * X)
        assert np.array_equal(g1, g2)


def pg_qp_oracle(gram, y, C, iters=60_000):
    """Projected-gradient maximizer of the SVM dual (independent route):
    gradient ascent with projection onto {0 <= a <= C, y.a = 0} via
    bisection on the equality multiplier."""
    Q = gram * np.outer(y, y)
    n = len(y)
    step = 1.0 / (np.linalg.norm(Q, 2) + 1.0)
    alpha = np.zeros(n)

    def project(v):
        def clipped(lam):
            return np.clip(v - lam * y, 0.0, C)
        lo, hi = -C - v.max() - 1.0, C + v.max() + 1.0
        for _ in range(80):
            mid = (lo + hi) / 2.0
            if clipped(mid) @ y > 0:
                lo = mid
            else:
                hi = mid
        return clipped((lo + hi) / 2.0)

    last_obj = -np.inf
    for it in range(1, iters + 1):
        grad = 1.0 - Q @ alpha
        alpha = project(alpha + step * grad)
        if it % 250 == 0:
            obj = dual_objective(alpha, y, gram)
            if obj - last_obj < 1e-10:
                break
            last_obj = obj
    return alpha


class TestSmo:
    def test_two_point_analytic(self):
        X = np.array([[0.0], [2.0]])
        y = np.array([-1.0, 1.0])
        m = smo_train(X, y, Kernel("polynomial", degree=1), C=1e4)
        g = decision(m, X)
        assert g[0] == pytest.approx(-1.0, abs=1e-6)
        assert g[1] == pytest.approx(1.0, abs=1e-6)

    def test_separable_blobs(self, rng):
        X = np.vstack([rng.normal(0, 0.5, (20, 2)), rng.normal(4, 0.5, (20, 2))])
        y = np.array([-1.0] * 20 + [1.0] * 20)
        m = smo_train(X, y, Kernel("rbf", sigma=2.0), C=100.0)
        assert np.all(np.sign(decision(m, X)) == y)

    def test_alpha_bounds_and_gap(self, rng):
        for trial in range(5):
            X = rng.normal(0, 1, (30, 3))
            y = np.where(X[:, 0] + 0.3 * rng.normal(size=30) > 0, 1.0, -1.0)
            if abs(y.sum()) == 30:
                continue
            C = [0.1, 1.0, 10.0][trial % 3]
            m = smo_train(X, y, Kernel("rbf", sigma=1.5), C=C)
            coef = np.abs(m.dual_coef)
            assert np.all(coef >= -1e-12) and np.all(coef <= C + 1e-9)
            assert m.kkt_residual <= 1e-3

    def test_dual_matches_pg_oracle(self, rng):
        for trial in range(20):
            X = rng.normal(0, 1, (20, 2))
            w = rng.normal(0, 1, 2)
            y = np.where(X @ w + 0.4 * rng.normal(size=20) > 0, 1.0, -1.0)
            if abs(y.sum()) == 20:
                y[0] = -y[0]
            kernel = Kernel("rbf", sigma=1.0 + trial % 3)
            C = [0.1, 1.0, 5.0][trial % 3]
            gram = kernel_matrix(kernel, X, X)
            m = smo_train(X, y, kernel, C=C, tol=1e-5)
            alpha = np.zeros(20)
            # recover alphas of the trained model for the dual value
            sv_rows = []
            gi = 0
            # dual objective from the oracle and from SMO's solution
            a_oracle = pg_qp_oracle(gram, y, C)
            obj_oracle = dual_objective(a_oracle, y, gram)
            # rebuild full alpha vector from the model
            a_smo = np.zeros(20)
            used = set()
            for sv, coef in zip(m.support_vectors, m.dual_coef):
                for i in range(20):
                    if i not in used and np.array_equal(X[i], sv):
                        a_smo[i] = abs(coef)
                        used.add(i)
                        break
            obj_smo = dual_objective(a_smo, y, gram)
            assert abs(obj_smo - obj_oracle) <= 1e-4 * max(1.0, abs(obj_oracle))

    def test_duality_gap(self, rng):
        X = rng.normal(0, 1, (25, 3))
        y = np.where(X[:, 0] > 0, 1.0, -1.0)
        kernel = Kernel("rbf", sigma=1.0)
        C = 2.0
        m = smo_train(X, y, kernel, C=C, tol=1e-5)
        gram = kernel_matrix(kernel, X, X)
        a = np.zeros(25)
        used = set()
        for sv, coef in zip(m.support_vectors, m.dual_coef):
            for i in range(25):
                if i not in used and np.array_equal(X[i], sv):
                    a[i] = abs(coef)
                    used.add(i)
                    break
        dual = dual_objective(a, y, gram)
        g = decision(m, X)
        hinge = np.maximum(0.0, 1.0 - y * g).sum()
        ay = a * y
        primal = 0.5 * ay @ gram @ ay + C * hinge
        assert dual <= primal + 1e-9
        assert (primal - dual) <= 1e-3 * max(1.0, abs(primal))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            smo_train(np.zeros((4, 1)), np.ones(4), Kernel("rbf", sigma=1.0), C=1.0)

    def test_deterministic(self, rng):
        X = rng.normal(0, 1, (30, 4))
        y = np.where(X[:, 0] > 0, 1.0, -1.0)
        m1 = smo_train(X, y, Kernel("rbf", sigma=1.0), C=1.0)
        m2 = smo_train(X, y, Kernel("rbf", sigma=1.0), C=1.0)
        assert np.array_equal(m1.dual_coef, m2.dual_coef)
        assert m1.bias == m2.bias


class TestPosterior:
    def test_posterior_in_unit_interval(self, rng):
        X = rng.normal(0, 1, (30, 2))
        y = np.where(X[:, 0] > 0, 1.0, -1.0)
        m = smo_train(X, y, Kernel("rbf", sigma=1.0), C=1.0)
        p = posterior(m, rng.normal(0, 2, (50, 2)))
        assert np.all((p > 0) & (p < 1))

    def test_monotone_in_decision(self, rng):
        X = rng.normal(0, 1, (40, 2))
        y = np.where(X[:, 0] > 0, 1.0, -1.0)
        m = smo_train(X, y, Kernel("rbf", sigma=1.0), C=10.0)
        T = rng.normal(0, 1.5, (100, 2))
        g = decision(m, T)
        p = posterior(m, T)
        order = np.argsort(g)
        assert np.all(np.diff(p[order]) >= 0)

    def test_threshold_agreement_on_separable(self, rng):
        X = np.vstack([rng.normal(0, 0.6, (30, 2)), rng.normal(3, 0.6, (30, 2))])
        y = np.array([-1.0] * 30 + [1.0] * 30)
        m = smo_train(X, y, Kernel("rbf", sigma=2.0), C=10.0)
        g = decision(m, X)
        p = posterior(m, X)
        agree = np.mean((g > 0) == (p >= 0.5))
        assert agree >= 0.95


class TestPlatt:
    def test_symmetric_separable(self):
        A, B = platt_fit(np.array([-1.0, -1.0, 1.0, 1.0]), np.array([-1, -1, 1, 1]))
        assert A < 0
        assert sigmoid_posterior(np.array([0.0]), A, B)[0] == pytest.approx(0.5, abs=0.05)

    def test_uninformative_decisions(self, rng):
        g = rng.normal(0, 1, 400)
        y = np.where(rng.random(400) < 0.7, 1, -1)  # labels independent of g
        A, B = platt_fit(g, y)
        assert abs(A) < 0.2
        p = sigmoid_posterior(g, A, B)
        prior = (y > 0).mean()
        assert np.max(np.abs(p - prior)) < 0.1

    def test_flip_antisymmetry(self, rng):
        g = rng.normal(0, 2, 60)
        y = np.where(g + rng.normal(0, 1, 60) > 0, 1, -1)
        if abs(y.sum()) == 60:
            y[0] = -y[0]
        A1, B1 = platt_fit(g, y)
        A2, B2 = platt_fit(g, -y)
        assert A1 == pytest.approx(-A2, abs=1e-6)
        assert B1 == pytest.approx(-B2, abs=1e-6)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            platt_fit(np.array([1.0, 2.0]), np.array([1, 1]))


def l1_bisection_oracle(S, y, C, cycles=400):
    """Coordinate-wise exact line minimization of the L1-logistic objective
    by shrinking-bracket golden-section search (independent of the
    soft-threshold solver)."""
    gold = (math.sqrt(5.0) - 1.0) / 2.0

    def line_min(fun, lo, hi, iters=200):
        a, b = lo, hi
        c = b - gold * (b - a)
        d = a + gold * (b - a)
        fc, fd = fun(c), fun(d)
        for _ in range(iters):
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - gold * (b - a)
                fc = fun(c)
            else:
                a, c, fc = c, d, fd
                d = a + gold * (b - a)
                fd = fun(d)
        return (a + b) / 2.0

    n, d = S.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(cycles):
        moved = 0.0
        for j in range(-1, d):
            def fun(t):
                if j < 0:
                    return l1_objective(w, t, S, y, C)
                w2 = w.copy()
                w2[j] = t
                return l1_objective(w2, b, S, y, C)
            cur = b if j < 0 else w[j]
            new = line_min(fun, cur - 4.0, cur + 4.0)
            if fun(new) < fun(cur):
                moved = max(moved, abs(new - cur))
                if j < 0:
                    b = new
                else:
                    w[j] = new
        if moved < 1e-9:
            break
    return w, b


class TestL1Linear:
    def test_heavy_regularization_shrinks_to_bias(self, rng):
        S = rng.normal(0, 1, (20, 5))
        y = np.array([1.0] * 14 + [-1.0] * 6)
        m = l1_linear_train(S, y, C=1e-5)
        assert np.all(m.weights == 0.0)
        # bias-only logistic fit equals the log-odds of the class prior
        assert m.bias == pytest.approx(math.log(14 / 6), abs=1e-4)
        assert np.all(m.posterior(S) == m.posterior(S)[0])

    def test_single_correlated_feature(self, rng):
        x = rng.normal(0, 1, 30)
        S = np.column_stack([x, rng.normal(0, 1, 30), rng.normal(0, 1, 30)])
        y = np.where(x > 0, 1.0, -1.0)
        m = l1_linear_train(S, y, C=0.5)
        assert m.support.tolist() == [0]
        assert m.weights[0] > 0

    def test_objective_matches_bisection_oracle(self, rng):
        for trial in range(5):
            n, d = 20, 4 + trial % 3
            S = rng.normal(0, 1, (n, d))
            w_true = rng.normal(0, 1, d)
            y = np.where(S @ w_true + 0.5 * rng.normal(size=n) > 0, 1.0, -1.0)
            if abs(y.sum()) == n:
                y[0] = -y[0]
            C = [0.3, 1.0, 3.0][trial % 3]
            m = l1_linear_train(S, y, C)
            obj_cd = l1_objective(m.weights, m.bias, S, y, C)
            w_o, b_o = l1_bisection_oracle(S, y, C)
            obj_oracle = l1_objective(w_o, b_o, S, y, C)
            assert obj_cd <= obj_oracle + 1e-5 * max(1.0, abs(obj_oracle))
            assert abs(obj_cd - obj_oracle) <= 1e-5 * max(1.0, abs(obj_oracle))

    def test_sparsity_monotone_in_C(self, rng):
        S = rng.normal(0, 1, (24, 12))
        w_true = np.zeros(12)
        w_true[:4] = rng.normal(0, 2, 4)
        y = np.where(S @ w_true > 0, 1.0, -1.0)
        if abs(y.sum()) == 24:
            y[0] = -y[0]
        sizes = []
        for C in (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0):
            m = l1_linear_train(S, y, C)
            sizes.append(len(m.support))
        assert sizes == sorted(sizes)

    def test_exact_zeros_off_support(self, rng):
        S = rng.normal(0, 1, (20, 8))
        y = np.where(S[:, 0] > 0, 1.0, -1.0)
        m = l1_linear_train(S, y, C=0.05)
        off = np.setdiff1d(np.arange(8), m.support)
        assert np.all(m.weights[off] == 0.0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            l1_linear_train(np.zeros((4, 2)), np.ones(4), C=1.0)


def test_standardization_zero_variance(rng):
    X = np.column_stack([rng.normal(0, 1, 10), np.full(10, 3.0)])
    s = Standardization.fit(X)
    Z = s.apply(X)
    assert np.allclose(Z[:, 1], 0.0)
    assert np.isfinite(Z).all()
