"""Uncertainty-aware set-valued representation learning for multiview records.

Each record maps to a diagonal-Gaussian posterior over a latent state;
training combines masked reconstruction, partial-view consistency, InfoNCE
and prior regularization, and everything is verifiable against an exact
linear-Gaussian oracle on synthetic data.
"""

from .diffmath import Node, Tape
from .encoder import (
    ModelConfig,
    PatientRecord,
    aggregate,
    encode,
    encode_modality,
    init_params,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    LatentSetError,
    NoEvidenceError,
    NonFiniteError,
    ShapeError,
)
from .gaussians import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GaussianPosterior,
    StandardPrior,
    entropy,
    kl,
    log_det_cov,
    poe_fuse,
    sample,
    skl,
    var_penalty,
    w2_sq,
)
from .inference import (
    PredictiveDistribution,
    evaluate_model,
    predict,
    predictive_entropy,
    representation,
    selective_predict,
    update_sequential,
)
from .metrics import MetricsReport, auprc, auroc, ece, mmd, mse, nll, spearman
from .objectives import (
    LossWeights,
    loss_cons,
    loss_nce,
    loss_rec,
    loss_reg,
    loss_sup,
    loss_total,
)
from .synthdata import (
    ExactPosterior,
    GeneratorSpec,
    bayes_optimal_metrics,
    exact_posterior,
    generate,
    likelihood_expert,
)
from .trainer import (
    AdamW,
    OptimConfig,
    finetune,
    fit_temperature,
    load_checkpoint,
    lr_at,
    pretrain,
    save_checkpoint,
)
from .viewgen import View, ViewPolicy, paired_views, sample_view, sweep_masks

__version__ = "0.1.0"
