"""Variational autoencoder with a transformation latent and a spatial-transformer output."""

from .model import (
    Architecture,
    GaussianPosterior,
    LatentPair,
    VaeModel,
    VarianceHead,
    conv_preset,
    elbo,
    fit_variance_head,
    gaussian_logpdf,
    generate,
    kl_gaussian,
    mnist_architecture,
    point_architecture,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .train import (
    METRIC_FIELDS,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    evaluate_epoch,
    geodesic_term,
    train,
    vtae_loss,
)
