"""Detectors mapping uncertainty information to d(x), the probability that an
image is benign.

Feature-based detectors (Entropy, OCSVM, Ellipse, CrossA) consume the
``(n, |C| + 3)`` feature matrix; the Heatmap detector consumes entropy
heatmaps of shape ``(n, H, W)``. Every detector reorders its fit data into a
canonical content order first, so a fit does not depend on presentation order.
"""
import hashlib
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from . import _kernels
from .errors import FormatError, NumericError, ShapeError
from .tensor import (Tensor, backward, bce_with_logits, conv2d, global_avg_pool, linear,
                     relu, sigmoid)
from .uncertainty import Heatmap, UncertaintyFeatures

DETECTOR_FORMAT = "segdetect-detector"
VARIANTS = ("Entropy", "OCSVM", "Ellipse", "CrossA", "Heatmap")


@dataclass(frozen=True)
class Verdict:
    d: float
    tau: float
    label: str


def classify(d, tau):
    """``perturbed`` iff d < tau; the boundary counts as benign."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return Verdict(float(d), float(tau), "perturbed" if d < tau else "benign")


def _canonical_order(X):
    X = np.asarray(X)
    keys = [hashlib.sha1(np.ascontiguousarray(row).tobytes()).hexdigest() for row in X]
    return np.array(sorted(range(len(keys)), key=lambda i: keys[i]), dtype=np.int64)


def _as_features(X):
    if isinstance(X, UncertaintyFeatures):
        return X.as_vector()[None, :]
    if isinstance(X, Heatmap):
        raise ShapeError("feature-based detector cannot score a heatmap")
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], UncertaintyFeatures):
        return np.array([f.as_vector() for f in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"feature-based detector expects an (n, features) matrix, got {X.shape}")
    return X


def _as_heatmaps(X):
    if isinstance(X, Heatmap):
        if X.kind != "entropy":
            raise ShapeError(f"Heatmap detector consumes entropy heatmaps, got {X.kind}")
        return np.asarray(X.values)[None]
    if isinstance(X, UncertaintyFeatures):
        raise ShapeError("Heatmap detector cannot score an aggregated feature vector")
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Heatmap):
        return np.stack([h.values for h in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"Heatmap detector expects (n, H, W) heatmaps, got {X.shape}")
    return X


class Detector:
    variant = None
    input_kind = "features"
    supervised = False

    def __init__(self):
        self.fitted = False
        self.mean_ = None
        self.scale_ = None

    # standardization ------------------------------------------------------
    def _fit_standardizer(self, X):
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)

    def _standardize(self, X):
        if X.shape[1] != self.mean_.shape[0]:
            raise ShapeError(f"{self.variant}: fitted on {self.mean_.shape[0]} features, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    # public API -----------------------------------------------------------
    def _inputs(self, X):
        return _as_heatmaps(X) if self.input_kind == "heatmap" else _as_features(X)

    def fit(self, benign, adversarial=None):
        if self.supervised:
            if adversarial is None or len(adversarial) == 0:
                raise ValueError(f"{self.variant} needs adversarial fit data")
        elif adversarial is not None:
            raise ValueError(f"{self.variant} is unsupervised and takes benign data only")
        B = self._inputs(benign)
        B = B[_canonical_order(B)]
        if self.supervised:
            A = self._inputs(adversarial)
            A = A[_canonical_order(A)]
            self._fit(B, A)
        else:
            self._fit(B)
        self.fitted = True
        return self

    def raw_score(self, X):
        self._require_fit()
        return self._raw(self._inputs(X))

    def score(self, X):
        """d(x) in [0, 1] for every row / heatmap of ``X``."""
        self._require_fit()
        return np.clip(self._calibrate(self._raw(self._inputs(X))), 0.0, 1.0)

    def _require_fit(self):
        if not self.fitted:
            raise RuntimeError(f"{self.variant} detector used before fit")

    # persistence ----------------------------------------------------------
    def _params(self):
        raise NotImplementedError

    def _load_params(self, params):
        raise NotImplementedError

    def to_dict(self):
        self._require_fit()
        out = {"format": DETECTOR_FORMAT, "version": 1, "variant": self.variant,
               "config": self._config(), "params": _tolist(self._params())}
        if self.mean_ is not None:
            out["standardization"] = {"mean": self.mean_.tolist(), "scale": self.scale_.tolist()}
        return out

    def _config(self):
        return {}


def _tolist(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _tolist(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tolist(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------

class EntropyDetector(Detector):
    """Linear ramp on mean entropy between its fit-set extremes."""
    variant = "Entropy"

    def _fit(self, B):
        if B.shape[0] < 2:
            raise ValueError("Entropy detector needs at least 2 benign samples")
        self.e_min_ = float(B[:, 0].min())
        self.e_max_ = float(B[:, 0].max())

    def _raw(self, X):
        return X[:, 0].copy()

    def _calibrate(self, raw):
        span = self.e_max_ - self.e_min_
        if span <= 0:
            return np.full(raw.shape, 0.5)
        return np.clip((self.e_max_ - raw) / span, 0.0, 1.0)

    def _params(self):
        return {"e_min": self.e_min_, "e_max": self.e_max_}

    def _load_params(self, p):
        self.e_min_, self.e_max_ = p["e_min"], p["e_max"]


# ---------------------------------------------------------------------------
# OCSVM
# ---------------------------------------------------------------------------

def rbf_kernel(A, B, gamma):
    sq = (A ** 2).sum(axis=1)[:, None] + (B ** 2).sum(axis=1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


class OCSVMDetector(Detector):
    """One-class SVM with RBF kernel, dual solved by SMO.

    Dual: minimize 0.5 a'Ka subject to 0 <= a_i <= 1 and sum(a) = nu * n.
    Raw score f(x) = sum_i a_i K(x_i, x) - rho, positive inside the support.
    """
    variant = "OCSVM"

    def __init__(self, nu=0.1, gamma="scale", tol=1e-6, max_iter=200000):
        super().__init__()
        self.nu = nu
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter

    def _config(self):
        return {"nu": self.nu, "gamma": self.gamma, "tol": self.tol, "max_iter": self.max_iter}

    def _fit(self, B):
        if B.shape[0] < 10:
            raise ValueError("OCSVM needs at least 10 benign samples")
        if not 0 < self.nu <= 1:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        self._fit_standardizer(B)
        Z = self._standardize(B)
        if self.gamma == "scale":
            var = Z.var()
            self.gamma_ = 1.0 / (Z.shape[1] * var) if var > 0 else 1.0
        else:
            self.gamma_ = float(self.gamma)
        K = rbf_kernel(Z, Z, self.gamma_)
        alpha, grad, self.n_iter_, violation = _kernels.active.smo_one_class(
            K, self.nu * Z.shape[0], self.tol, self.max_iter)
        if violation > self.tol:
            raise NumericError(f"OCSVM SMO did not converge in {self.max_iter} iterations; "
                               f"KKT residual {violation:.3e}")
        free = (alpha > 1e-12) & (alpha < 1 - 1e-12)
        if free.any():
            rho = grad[free].mean()
        else:
            upper = grad[alpha >= 1 - 1e-12]
            lower = grad[alpha <= 1e-12]
            lo = upper.max() if upper.size else -np.inf
            hi = lower.min() if lower.size else np.inf
            rho = 0.5 * (lo + hi) if np.isfinite(lo) and np.isfinite(hi) else (lo if np.isfinite(lo) else hi)
        sv = alpha > 0
        self.support_ = Z[sv]
        self.dual_coef_ = alpha[sv]
        self.rho_ = float(rho)
        fit_raw = self._raw_standardized(Z)
        s = float(np.median(np.abs(fit_raw)))
        self.calib_scale_ = s if s > 0 else 1.0

    def _raw_standardized(self, Z):
        return rbf_kernel(Z, self.support_, self.gamma_) @ self.dual_coef_ - self.rho_

    def _raw(self, X):
        return self._raw_standardized(self._standardize(X))

    def _calibrate(self, raw):
        return sigmoid(raw / self.calib_scale_)

    def _params(self):
        return {"gamma": self.gamma_, "rho": self.rho_, "support": self.support_,
                "dual_coef": self.dual_coef_, "calib_scale": self.calib_scale_}

    def _load_params(self, p):
        self.gamma_, self.rho_ = p["gamma"], p["rho"]
        self.support_ = np.array(p["support"], dtype=np.float64).reshape(len(p["dual_coef"]), -1)
        self.dual_coef_ = np.array(p["dual_coef"], dtype=np.float64)
        self.calib_scale_ = p["calib_scale"]


# ---------------------------------------------------------------------------
# Ellipse
# ---------------------------------------------------------------------------

class EllipseDetector(Detector):
    """Robust Gaussian fit by iterative trimming; raw score is the squared
    Mahalanobis distance.

    Each round drops the ``trim`` share of points with the largest distance
    and re-estimates location and scatter from the rest. The scatter is
    rescaled for consistency at the Gaussian model and regularized by a ridge.
    """
    variant = "Ellipse"

    def __init__(self, quantile=0.975, trim=0.25, rounds=10, ridge=1e-6):
        super().__init__()
        self.quantile = quantile
        self.trim = trim
        self.rounds = rounds
        self.ridge = ridge

    def _config(self):
        return {"quantile": self.quantile, "trim": self.trim, "rounds": self.rounds, "ridge": self.ridge}

    def _scatter(self, Z, factor=1.0):
        cov = np.cov(Z, rowvar=False, bias=False).reshape(Z.shape[1], Z.shape[1]) * factor
        cov = cov + self.ridge * np.eye(Z.shape[1])
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError("Ellipse scatter matrix is singular after regularization") from exc
        return cov, chol

    @staticmethod
    def _mahal(Z, loc, chol):
        sol = np.linalg.solve(chol, (Z - loc).T)
        return (sol ** 2).sum(axis=0)

    def _fit(self, B):
        n, p = B.shape
        if n <= p:
            raise ValueError(f"Ellipse needs more samples ({n}) than features ({p})")
        self._fit_standardizer(B)
        Z = self._standardize(B)
        keep_n = n - int(np.floor(self.trim * n))
        h = keep_n / n
        # consistency of a trimmed Gaussian scatter estimate
        factor = h / chi2.cdf(chi2.ppf(h, p), p + 2) if h < 1 else 1.0
        loc = Z.mean(axis=0)
        cov, chol = self._scatter(Z)
        for _ in range(self.rounds):
            d2 = self._mahal(Z, loc, chol)
            keep = np.argsort(d2, kind="stable")[:keep_n]
            loc = Z[keep].mean(axis=0)
            cov, chol = self._scatter(Z[keep], factor)
        self.loc_ = loc
        self.cov_ = cov
        self._chol = chol
        self.threshold_ = float(chi2.ppf(self.quantile, p))
        q1, q3 = np.percentile(self._mahal(Z, loc, chol), [25, 75])
        self.calib_scale_ = float(q3 - q1) if q3 > q1 else 1.0

    @property
    def location_(self):
        """Robust location in original feature units."""
        return self.mean_ + self.scale_ * self.loc_

    def _raw(self, X):
        return self._mahal(self._standardize(X), self.loc_, self._chol)

    def _calibrate(self, raw):
        return sigmoid((self.threshold_ - raw) / self.calib_scale_)

    def _params(self):
        return {"loc": self.loc_, "cov": self.cov_, "threshold": self.threshold_,
                "calib_scale": self.calib_scale_}

    def _load_params(self, p):
        self.loc_ = np.array(p["loc"], dtype=np.float64)
        self.cov_ = np.array(p["cov"], dtype=np.float64)
        self._chol = np.linalg.cholesky(self.cov_)
        self.threshold_, self.calib_scale_ = p["threshold"], p["calib_scale"]


# ---------------------------------------------------------------------------
# CrossA: L1-penalized logistic regression
# ---------------------------------------------------------------------------

def logistic_objective(w, b, X, y, l1):
    """Mean logistic loss (labels in {0, 1}) plus l1 * ||w||_1."""
    z = X @ w + b
    s = 2.0 * y - 1.0
    return float(np.mean(np.logaddexp(0.0, -s * z)) + l1 * np.abs(w).sum())


def fit_l1_logistic(X, y, l1, max_iter=20000, tol=1e-10, grad_tol=1e-8):
    """Accelerated proximal gradient (FISTA with adaptive restart).

    The intercept is not penalized. Converged when the objective decrease of
    an accepted step falls below ``tol`` and the proximal-gradient residual
    below ``grad_tol``. Returns ``(w, b, converged, iterations)``.
    """
    n, p = X.shape
    Xa = np.hstack([np.ones((n, 1)), X])
    lip = 0.25 * np.linalg.norm(Xa, 2) ** 2 / n
    step = 1.0 / lip if lip > 0 else 1.0
    s = 2.0 * y - 1.0

    def grad(theta):
        z = Xa @ theta
        return Xa.T @ (-s * sigmoid(-s * z)) / n

    def prox(theta):
        out = theta.copy()
        out[1:] = np.sign(theta[1:]) * np.maximum(np.abs(theta[1:]) - step * l1, 0.0)
        return out

    def obj(theta):
        return logistic_objective(theta[1:], theta[0], X, y, l1)

    theta = np.zeros(p + 1)
    momentum = theta.copy()
    t = 1.0
    f_old = obj(theta)
    best, f_best = theta, f_old
    for it in range(1, max_iter + 1):
        new = prox(momentum - step * grad(momentum))
        f_new = obj(new)
        if f_new > f_old:
            # adaptive restart: drop momentum, redo from the current iterate
            momentum = theta.copy()
            t = 1.0
            continue
        residual = np.linalg.norm(theta - prox(theta - step * grad(theta))) / step
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        momentum = new + ((t - 1.0) / t_next) * (new - theta)
        decrease = f_old - f_new
        theta, f_old, t = new, f_new, t_next
        if f_new < f_best:
            best, f_best = new, f_new
        if decrease < tol and residual < grad_tol:
            return best[1:], float(best[0]), True, it
    return best[1:], float(best[0]), False, max_iter


class CrossADetector(Detector):
    """Supervised L1 logistic regression on standardized features; d(x) is
    the fitted probability of the benign class."""
    variant = "CrossA"
    supervised = True

    def __init__(self, l1=0.01, max_iter=20000):
        super().__init__()
        self.l1 = l1
        self.max_iter = max_iter

    def _config(self):
        return {"l1": self.l1, "max_iter": self.max_iter}

    def _fit(self, B, A):
        X = np.vstack([B, A])
        y = np.concatenate([np.ones(len(B)), np.zeros(len(A))])
        self._fit_standardizer(X)
        w, b, ok, self.n_iter_ = fit_l1_logistic(self._standardize(X), y, self.l1, self.max_iter)
        if not ok:
            warnings.warn(f"CrossA did not converge in {self.max_iter} iterations; "
                          "returning best iterate", RuntimeWarning, stacklevel=3)
        self.coef_ = w
        self.intercept_ = b

    def _raw(self, X):
        return self._standardize(X) @ self.coef_ + self.intercept_

    def _calibrate(self, raw):
        return sigmoid(raw)

    def _params(self):
        return {"coef": self.coef_, "intercept": self.intercept_}

    def _load_params(self, p):
        self.coef_ = np.array(p["coef"], dtype=np.float64)
        self.intercept_ = p["intercept"]


# ---------------------------------------------------------------------------
# Heatmap CNN
# ---------------------------------------------------------------------------

class HeatmapDetector(Detector):
    """Two 3x3 conv + ReLU layers, global average pooling and a logistic
    unit, trained with binary cross entropy on entropy heatmaps."""
    variant = "Heatmap"
    input_kind = "heatmap"
    supervised = True

    def __init__(self, channels=8, epochs=30, batch_size=16, learning_rate=0.05,
                 momentum=0.9, seed=0):
        super().__init__()
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def _config(self):
        return {"channels": self.channels, "epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "momentum": self.momentum, "seed": self.seed}

    def _init_weights(self, rng):
        c = self.channels
        return [
            rng.normal(0.0, np.sqrt(2.0 / 9), size=(3, 3, 1, c)), np.zeros(c),
            rng.normal(0.0, np.sqrt(2.0 / (9 * c)), size=(3, 3, c, c)), np.zeros(c),
            rng.normal(0.0, np.sqrt(1.0 / c), size=(c, 1)), np.zeros(1),
        ]

    def _logits(self, params, X):
        w1, b1, w2, b2, w3, b3 = params
        h = relu(conv2d(X, w1, b1, padding=1))
        h = relu(conv2d(h, w2, b2, padding=1))
        return linear(global_avg_pool(h), w3, b3)

    def _prep(self, maps):
        return ((maps - self.input_mean_) / self.input_scale_)[..., None]

    def _fit(self, B, A):
        if B.shape[1:] != A.shape[1:]:
            raise ShapeError(f"benign heatmaps {B.shape[1:]} and adversarial {A.shape[1:]} differ")
        maps = np.concatenate([B, A])
        y = np.concatenate([np.ones(len(B)), np.zeros(len(A))])
        self.input_mean_ = float(maps.mean())
        std = float(maps.std())
        self.input_scale_ = std if std > 0 else 1.0
        X = self._prep(maps)
        rng = np.random.default_rng(self.seed)
        weights = self._init_weights(rng)
        velocity = [np.zeros_like(w) for w in weights]
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(y))
            losses = []
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                params = [Tensor(w, requires_grad=True) for w in weights]
                loss = bce_with_logits(self._logits(params, Tensor(X[idx])), y[idx])
                if not np.isfinite(loss.item()):
                    raise NumericError(f"Heatmap detector diverged at epoch {epoch}")
                grads = backward(loss)
                for k, p in enumerate(params):
                    velocity[k] = self.momentum * velocity[k] - self.learning_rate * grads[p]
                    weights[k] = weights[k] + velocity[k]
                losses.append(loss.item())
            self.history_.append(float(np.mean(losses)))
        self.weights_ = weights

    def _raw(self, X):
        params = [Tensor(w) for w in self.weights_]
        out = []
        for start in range(0, len(X), 32):
            out.append(self._logits(params, Tensor(self._prep(X[start:start + 32]))).data[:, 0])
        return np.concatenate(out)

    def _calibrate(self, raw):
        return sigmoid(raw)

    def _params(self):
        return {"input_mean": self.input_mean_, "input_scale": self.input_scale_,
                "weights": [w for w in self.weights_],
                "shapes": [list(w.shape) for w in self.weights_]}

    def _load_params(self, p):
        self.input_mean_, self.input_scale_ = p["input_mean"], p["input_scale"]
        self.weights_ = [np.array(w, dtype=np.float64).reshape(s)
                         for w, s in zip(p["weights"], p["shapes"])]


# ---------------------------------------------------------------------------
# factory and persistence
# ---------------------------------------------------------------------------

_CLASSES = {cls.variant: cls for cls in
            (EntropyDetector, OCSVMDetector, EllipseDetector, CrossADetector, HeatmapDetector)}


def make_detector(variant, **params):
    try:
        cls = _CLASSES[variant]
    except KeyError:
        raise ValueError(f"unknown detector {variant!r}; choose from {VARIANTS}") from None
    return cls(**params)


def score(model, inputs):
    """d(x) for ``inputs``; rejects inputs of the wrong kind for the variant."""
    return model.score(inputs)


def save_detector(path, model):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_detector(path):
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read detector file {path}: {exc}") from exc
    if blob.get("format") != DETECTOR_FORMAT or blob.get("variant") not in _CLASSES:
        raise FormatError(f"{path} is not a detector parameter file")
    det = make_detector(blob["variant"], **blob.get("config", {}))
    if "standardization" in blob:
        det.mean_ = np.array(blob["standardization"]["mean"], dtype=np.float64)
        det.scale_ = np.array(blob["standardization"]["scale"], dtype=np.float64)
    det._load_params(blob["params"])
    det.fitted = True
    return det
