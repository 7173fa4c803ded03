"""shapshield: detect adversarial samples from the distribution shift of
SHAP feature attributions.

The package trains desk-scale victim classifiers, attacks them with
gradient-based adversarial generators, computes Shapley-value attributions,
and detects adversarial inputs with supervised and semi-supervised
detectors over those attributions.
"""

from .attacks import AttackConfig, AttackResult, cw_attack, pgd_attack, \
    saliency_sparse_attack
from .attribution import AttributionMap, BackgroundSet, ModelFunction, \
    exact_shap, gradient_shap, loo_attribution, sampling_shap
from .data import Dataset, NormStats, gen_images, gen_tabular, standardize
from .detectors import DetectorModel, DetectorVerdict, detect, \
    reconstruction_features, train_kernel_density_detector, train_ml_loo_detector, \
    train_shap_autoencoder, train_shap_conv, train_shap_mlp, train_svm
from .harness import ExperimentConfig, ResultsMatrix, emit_reports, \
    run_experiment, spearman_correlation
from .nn import AdamState, adam_step, forward, loss_bce, loss_kl_gaussian, loss_mse
from .svm import SvmModel
from .tensor import Tensor, backward
from .victims import VictimConfig, VictimModel, hidden_features, predict, train_victim

__version__ = "0.1.0"
