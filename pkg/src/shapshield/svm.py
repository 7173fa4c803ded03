"""Soft-margin RBF-kernel SVM trained by sequential minimal optimization.

Deterministic variant of Platt's SMO: the violating pair is chosen by the
usual max-|E1 - E2| heuristic, but sweep order is fixed so training is
reproducible. Training fails loudly if the KKT conditions are not met
within the sweep budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SvmModel:
    support_vectors: np.ndarray   # (n_sv, d)
    dual_coeffs: np.ndarray       # alpha_i * y_i, |alpha_i| <= C
    bias: float
    gamma: float
    C: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = rbf_kernel(x, self.support_vectors, self.gamma)
        return k @ self.dual_coeffs + self.bias


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-gamma * d2)


def kkt_violation(K: np.ndarray, y: np.ndarray, alpha: np.ndarray, b: float,
                  C: float) -> float:
    """Largest violation of the soft-margin optimality conditions."""
    margins = y * (K @ (alpha * y) + b)
    viol = np.zeros_like(margins)
    at_zero = alpha <= 1e-12
    at_c = alpha >= C - 1e-12
    interior = ~at_zero & ~at_c
    viol[at_zero] = np.maximum(0.0, 1.0 - margins[at_zero])
    viol[at_c] = np.maximum(0.0, margins[at_c] - 1.0)
    viol[interior] = np.abs(margins[interior] - 1.0)
    return float(viol.max()) if viol.size else 0.0


def smo_train(X: np.ndarray, y: np.ndarray, C: float = 1.0,
              gamma: float | None = None, tol: float = 1e-3,
              max_sweeps: int = 200) -> SvmModel:
    """Train on labels in {-1, +1}; gamma defaults to 1 / feature count."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if gamma is None:
        gamma = 1.0 / d
    K = rbf_kernel(X, X, gamma)
    alpha = np.zeros(n)
    state = {"b": 0.0, "E": -y.copy()}    # E_i = f(x_i) - y_i with f = 0 at start

    def take_step(i1: int, i2: int) -> bool:
        if i1 == i2:
            return False
        a1, a2 = alpha[i1], alpha[i2]
        y1, y2 = y[i1], y[i2]
        e1, e2 = state["E"][i1], state["E"][i2]
        s = y1 * y2
        if s < 0:
            low, high = max(0.0, a2 - a1), min(C, C + a2 - a1)
        else:
            low, high = max(0.0, a1 + a2 - C), min(C, a1 + a2)
        if high - low < 1e-12:
            return False
        eta = K[i1, i1] + K[i2, i2] - 2.0 * K[i1, i2]
        if eta <= 1e-15:
            return False
        a2_new = np.clip(a2 + y2 * (e1 - e2) / eta, low, high)
        if abs(a2_new - a2) < 1e-12 * (a2_new + a2 + 1e-12):
            return False
        a1_new = a1 + s * (a2 - a2_new)
        d1 = y1 * (a1_new - a1)
        d2 = y2 * (a2_new - a2)
        b_old = state["b"]
        b1 = b_old - e1 - d1 * K[i1, i1] - d2 * K[i1, i2]
        b2 = b_old - e2 - d1 * K[i1, i2] - d2 * K[i2, i2]
        if 1e-12 < a1_new < C - 1e-12:
            b_new = b1
        elif 1e-12 < a2_new < C - 1e-12:
            b_new = b2
        else:
            b_new = 0.5 * (b1 + b2)
        alpha[i1], alpha[i2] = a1_new, a2_new
        state["E"] += d1 * K[:, i1] + d2 * K[:, i2] + (b_new - b_old)
        state["b"] = b_new
        return True

    def examine(i2: int) -> int:
        e2 = state["E"][i2]
        r2 = e2 * y[i2]
        if (r2 < -tol and alpha[i2] < C) or (r2 > tol and alpha[i2] > 0):
            non_bound = np.where((alpha > 1e-12) & (alpha < C - 1e-12))[0]
            if len(non_bound) > 1:
                i1 = non_bound[np.argmax(np.abs(state["E"][non_bound] - e2))]
                if take_step(int(i1), i2):
                    return 1
            for i1 in non_bound:
                if take_step(int(i1), i2):
                    return 1
            for i1 in range(n):
                if take_step(i1, i2):
                    return 1
        return 0

    examine_all = True
    for _sweep in range(max_sweeps):
        changed = 0
        if examine_all:
            for i in range(n):
                changed += examine(i)
        else:
            for i in np.where((alpha > 1e-12) & (alpha < C - 1e-12))[0]:
                changed += examine(int(i))
        if examine_all:
            if changed == 0:
                break
            examine_all = False
        elif changed == 0:
            examine_all = True
    else:
        viol = kkt_violation(K, y, alpha, state["b"], C)
        if viol > tol:
            raise RuntimeError(
                f"smo_train failed to converge in {max_sweeps} sweeps: "
                f"max KKT violation {viol:.2e} > tol {tol:.0e}, "
                f"{int((alpha > 1e-12).sum())}/{n} support vectors")

    viol = kkt_violation(K, y, alpha, state["b"], C)
    if viol > tol:
        raise RuntimeError(f"smo_train: KKT violation {viol:.2e} above "
                           f"tolerance {tol:.0e} at termination")
    sv = alpha > 1e-12
    return SvmModel(support_vectors=X[sv].copy(),
                    dual_coeffs=(alpha * y)[sv],
                    bias=float(state["b"]), gamma=float(gamma), C=float(C))
