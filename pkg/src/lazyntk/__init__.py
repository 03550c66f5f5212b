"""Training erf networks in function space: analytic NNGP/NTK kernels, losses
on logits, the kernel gradient flow and its fixed points, finite-width
networks for comparison, and ensembles of infinite-width networks.

Submodules
----------
kernels      analytic NNGP and NTK of fully connected erf networks
losses       MSE, cross-entropy (full and reference-class) and Brier losses
flow         kernel gradient flow, its MAP fixed point and test predictions
network      finite-width networks, empirical NTK and parameter-space training
ensemble     prior draws pushed through the flow, Gaussian and Laplace approximations
estimators   scikit-learn estimators built on the above
experiments  config-driven experiment runners used by the ``lazyntk`` command
"""

from .ensemble import (EnsembleSummary, MapAnchor, gap_certificate, gaussian_approx, laplace_cov, push_through,
                       sample_prior, summarize_ensemble)
from .estimators import KernelFeatures, NTKClassifier, NTKEnsembleClassifier
from .flow import ConvergenceError, FlowProblem, integrate_flow, phi_inverse, predict_test, stationary_points
from .kernels import ArchSpec, KernelPack, assemble_pack, kernel_matrices, nngp_kernel, ntk_kernel
from .losses import LossKind, LossSpec, TargetSet, loss_gradient, loss_hessian, loss_value
from .network import empirical_ntk, forward, init_net, train_flow, train_linearized

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "KernelPack", "assemble_pack", "kernel_matrices", "nngp_kernel", "ntk_kernel",
    "LossKind", "LossSpec", "TargetSet", "loss_value", "loss_gradient", "loss_hessian",
    "FlowProblem", "ConvergenceError", "integrate_flow", "phi_inverse", "predict_test", "stationary_points",
    "init_net", "forward", "empirical_ntk", "train_flow", "train_linearized",
    "MapAnchor", "EnsembleSummary", "sample_prior", "push_through", "gaussian_approx", "laplace_cov",
    "gap_certificate", "summarize_ensemble",
    "NTKClassifier", "NTKEnsembleClassifier", "KernelFeatures",
]
