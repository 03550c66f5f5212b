"""scikit-learn estimators on top of the infinite-width kernels.

``NTKClassifier`` trains the infinite-width network in function space
(starting from the zero function, so the result is the MAP of the
regularized problem), ``NTKEnsembleClassifier`` averages over networks
with random initial functions drawn from the NNGP prior, and
``KernelFeatures`` maps inputs to kernel evaluations against fitted
reference points.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.metaestimators import available_if
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .ensemble import MapAnchor, _cholesky_escalating, gaussian_approx, laplace_cov, push_through_many, sample_prior
from .flow import FlowProblem, integrate_flow, phi_inverse
from .kernels import ArchSpec, kernel_matrices
from .losses import LossKind, LossSpec, TargetSet, softmax, softmax_ref

__all__ = ["NTKClassifier", "NTKEnsembleClassifier", "KernelFeatures"]


def _logit_dim(loss: LossKind, n_classes: int) -> int:
    return n_classes - 1 if loss is LossKind.CE_REF else n_classes


def _to_probs(loss: LossKind, logits: np.ndarray) -> np.ndarray:
    if loss is LossKind.CE_REF:
        probs, ref = softmax_ref(logits)
        return np.column_stack([ref, probs])
    return softmax(logits, axis=1)


class _KernelModel(ClassifierMixin, BaseEstimator):
    """Shared fitting logic; subclasses decide how test logits are formed."""

    def _arch(self, n_features: int, n_out: int) -> ArchSpec:
        return ArchSpec(self.depth, n_features, n_out, self.sigma_w, self.sigma_b)

    def _fit_common(self, X, y):
        X, y = validate_data(self, X, y, y_numeric=False)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("only one class present in y; need at least two classes")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        self.loss_ = LossKind(self.loss)
        if self.loss_ is LossKind.BRIER_REF:
            raise ValueError("brier_ref is a single-logit loss; use 'ce_ref' for binary problems")
        targets = TargetSet.from_labels(codes, self.classes_.size, self.label_smoothing)
        self.spec_ = LossSpec(self.loss_, targets.probs)
        self.n_logits_ = self.spec_.n_logits
        self.arch_ = self._arch(X.shape[1], self.n_logits_)
        self.X_train_ = X
        return X

    def _joint_problem(self, X, g0=None) -> FlowProblem:
        """Problem over the training points followed by ``X``."""
        pts = np.vstack([self.X_train_, X])
        nngp, ntk = kernel_matrices(self.arch_, pts)
        nngp = 0.5 * (nngp + nngp.T)
        ntk = 0.5 * (ntk + ntk.T)
        return FlowProblem(ntk, self.X_train_.shape[0], self.spec_, self.beta, self.eta0, g0, nngp)

    def _check_X(self, X):
        check_is_fitted(self, "X_train_")
        return validate_data(self, X, reset=False)

    def _has_probs(self):
        return LossKind(self.loss) is not LossKind.MSE

    def _scores(self, logits: np.ndarray) -> np.ndarray:
        """One score per class (a single column for two classes), as scikit-learn expects."""
        if self.loss_ is LossKind.CE_REF:
            logits = np.column_stack([np.zeros(logits.shape[0]), logits])
        if logits.shape[1] == 2:
            return logits[:, 1] - logits[:, 0]
        return logits

    def decision_function(self, X):
        """Class scores at ``X``; a 1-d margin for binary problems."""
        return self._scores(self.logits(X))

    @available_if(_has_probs)
    def predict_proba(self, X):
        """Class probabilities, columns ordered as ``classes_``."""
        logits = self.logits(X)
        return _to_probs(self.loss_, logits)

    def predict(self, X):
        scores = self.decision_function(X)
        idx = (scores > 0).astype(int) if scores.ndim == 1 else np.argmax(scores, axis=1)
        return self.classes_[idx]


class NTKClassifier(_KernelModel):
    """Infinite-width erf network trained by kernel gradient flow.

    Parameters
    ----------
    depth, sigma_w, sigma_b : architecture of the network whose NTK is used.
    loss : ``"ce"``, ``"ce_ref"`` (reference class ``classes_[0]``) or ``"mse"``.
    beta : strength of the pull towards initialization.
    label_smoothing : mixes one-hot targets with the uniform distribution.
    t_end : train up to this flow time; ``None`` means to convergence.
    eta0 : learning rate of the flow (only matters with finite ``t_end``).
    """

    def __init__(self, depth=2, sigma_w=1.5, sigma_b=0.1, loss="ce_ref", beta=0.1, label_smoothing=0.0,
                 t_end=None, eta0=1.0):
        self.depth = depth
        self.sigma_w = sigma_w
        self.sigma_b = sigma_b
        self.loss = loss
        self.beta = beta
        self.label_smoothing = label_smoothing
        self.t_end = t_end
        self.eta0 = eta0

    def fit(self, X, y):
        X = self._fit_common(X, y)
        nngp, ntk = kernel_matrices(self.arch_, X)
        self.problem_ = FlowProblem(0.5 * (ntk + ntk.T), X.shape[0], self.spec_, self.beta, self.eta0,
                                    nngp=0.5 * (nngp + nngp.T))
        if self.t_end is None:
            self.g_train_ = phi_inverse(self.problem_, np.zeros(self.problem_.train_dim))
        else:
            self.g_train_ = integrate_flow(self.problem_, float(self.t_end), check_identity=False)[-1].g_train
        # Theta^{-1} g, reused for every prediction
        self.dual_coef_ = self.problem_.solve_theta(self.g_train_)
        return self

    def logits(self, X):
        """Trained network outputs at ``X`` (``K - 1`` columns for ``ce_ref``)."""
        X = self._check_X(X)
        _, ntk = kernel_matrices(self.arch_, X, self.X_train_)
        K = self.n_logits_
        coef = self.dual_coef_.reshape(-1, K)
        return ntk @ coef


class NTKEnsembleClassifier(_KernelModel):
    """Average over infinite-width networks with random initial functions.

    Each member starts from a joint NNGP prior draw on training and test
    points and is trained to convergence. ``predict_proba`` averages member
    probabilities; ``decision_function`` returns the mean logits. The
    Gaussian approximation of the member distribution and the Laplace
    covariance are available through :meth:`predict_distribution`.
    """

    def __init__(self, depth=2, sigma_w=1.5, sigma_b=0.1, loss="ce_ref", beta=0.1, label_smoothing=0.0,
                 n_members=100, seed=0, eta0=1.0):
        self.depth = depth
        self.sigma_w = sigma_w
        self.sigma_b = sigma_b
        self.loss = loss
        self.beta = beta
        self.label_smoothing = label_smoothing
        self.n_members = n_members
        self.seed = seed
        self.eta0 = eta0

    def fit(self, X, y):
        if self.beta <= 0:
            raise ValueError("ensembles need beta > 0; with beta = 0 every member is trained to the same point")
        if int(self.n_members) < 1:
            raise ValueError("n_members must be positive")
        X = self._fit_common(X, y)
        problem = self._joint_problem(X[:0])
        self.anchor_ = MapAnchor.from_problem(problem)
        draws = sample_prior(problem.nngp, int(self.n_members), self.seed, output_dim=self.n_logits_)
        result = push_through_many(problem, draws)
        self.failure_rate_ = result.failure_rate
        K, n = self.n_logits_, X.shape[0]
        g0 = draws[result.index]
        # f(x) = g0(x) + Theta(x, X) Theta^-1 (g_inf - g0(X)); the coefficients do not depend on x
        self.member_dual_ = np.array([problem.solve_theta(g) for g in result.train - g0]).reshape(-1, n, K)
        L = _cholesky_escalating(problem.nngp)
        self.prior_chol_ = L
        self.member_prior_coef_ = np.array([cho_solve((L, True), g.reshape(n, K)) for g in g0])
        # shared standard normals for the query-point part of every member's prior draw
        self.member_noise_ = np.random.default_rng([int(self.seed), 1]).standard_normal((result.n_ok, K))
        return self

    def member_logits(self, X) -> np.ndarray:
        """``(n_members_ok, n_points, n_logits)`` outputs of the trained members at ``X``.

        A member's initial function at a query point is drawn from the NNGP
        prior conditioned on its initial values at the training points,
        using one standard-normal vector per member shared across query
        points. Per-point marginals are exact and the result does not depend
        on which other points are queried; joint draws over several query
        points come from :meth:`sample_joint`.
        """
        X = self._check_X(X)
        nngp_tx, ntk_tx = kernel_matrices(self.arch_, X, self.X_train_)
        nngp_tt = np.array([kernel_matrices(self.arch_, x[None, :])[0][0, 0] for x in X])
        explained = np.sum(solve_triangular(self.prior_chol_, nngp_tx.T, lower=True) ** 2, axis=0)
        cond_sd = np.sqrt(np.maximum(nngp_tt - explained, 0.0))
        cond_mean = np.einsum("tn,mnk->mtk", nngp_tx, self.member_prior_coef_)
        noise = cond_sd[None, :, None] * self.member_noise_[:, None, :]
        return cond_mean + noise + np.einsum("tn,mnk->mtk", ntk_tx, self.member_dual_)

    def sample_joint(self, X, n_members=None, seed=None) -> np.ndarray:
        """Fresh members with a joint prior draw over training points and ``X``."""
        X = self._check_X(X)
        problem = self._joint_problem(X)
        n = int(self.n_members if n_members is None else n_members)
        draws = sample_prior(problem.nngp, n, self.seed if seed is None else seed, output_dim=self.n_logits_)
        result = push_through_many(problem, draws)
        return result.test.reshape(result.n_ok, X.shape[0], self.n_logits_)

    def logits(self, X):
        """Mean member output at ``X``."""
        return self.member_logits(X).mean(axis=0)

    @available_if(_KernelModel._has_probs)
    def predict_proba(self, X):
        """Member-averaged class probabilities."""
        return np.mean([_to_probs(self.loss_, m) for m in self.member_logits(X)], axis=0)

    def predict(self, X):
        check_is_fitted(self, "X_train_")
        if self.loss_ is LossKind.MSE:
            return super().predict(X)
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def decision_function(self, X):
        """Member-averaged class probabilities (margin of the two probabilities for binary problems)."""
        check_is_fitted(self, "X_train_")
        if self.loss_ is LossKind.MSE:
            return super().decision_function(X)
        p = self.predict_proba(X)
        return p[:, 1] - p[:, 0] if p.shape[1] == 2 else p

    def predict_distribution(self, X, kernel_equal: bool = False):
        """``(mu_ens, sigma_ens, sigma_lap)`` over the flattened outputs at ``X``."""
        X = self._check_X(X)
        problem = self._joint_problem(X)
        mu, sigma = gaussian_approx(self.anchor_, problem, kernel_equal=kernel_equal)
        return mu, sigma, laplace_cov(self.anchor_, problem)


class KernelFeatures(TransformerMixin, BaseEstimator):
    """Represent inputs by their NTK or NNGP values against the fitted points."""

    def __init__(self, depth=2, sigma_w=1.5, sigma_b=0.1, kernel="ntk"):
        self.depth = depth
        self.sigma_w = sigma_w
        self.sigma_b = sigma_b
        self.kernel = kernel

    def fit(self, X, y=None):
        if self.kernel not in ("ntk", "nngp"):
            raise ValueError("kernel must be 'ntk' or 'nngp'")
        X = validate_data(self, X)
        self.arch_ = ArchSpec(self.depth, X.shape[1], 1, self.sigma_w, self.sigma_b)
        self.X_fit_ = X
        return self

    def transform(self, X):
        check_is_fitted(self, "X_fit_")
        X = validate_data(self, X, reset=False)
        nngp, ntk = kernel_matrices(self.arch_, X, self.X_fit_)
        return ntk if self.kernel == "ntk" else nngp
