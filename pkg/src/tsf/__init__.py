"""Thermal spread function (TSF) simulation, inversion and classification.

A focused beam heats a spot on a slab; the camera records the surface as it
warms and cools. ``forward`` simulates that stack with an explicit 3D
finite-difference solver, ``adjoint`` differentiates the loss through the
solver exactly, ``inverse`` recovers diffusivity and absorption maps with Adam,
``baseline2d`` is the image-only curve fit, and ``classify`` maps recovered
parameters to material labels.
"""

from .adjoint import GradCheckReport, LossReport, ParamGradients, grad_params, gradient_check, loss_mse
from .baseline2d import BaselineFit, fit_pixelwise
from .classify import (METAL_LABEL, ConfusionMatrix, FeatureVector, MaterialDataset, classify_sample,
                       extract_features, loo_cv, predict, train_centroid, train_mlp)
from .domain import (CaptureConfig, EmissivityComponents, GridSpec, ParamMaps, SourceModel,
                     TemperatureField, TsfStack, diffusivity_from_bulk, eps_prime_from_components,
                     true_temp_from_camera)
from .errors import (DivergenceError, FormatError, FrameStepMismatchError, InvalidArgumentError,
                     StabilityError, TrainingError)
from .forward import StabilityReport, simulate, stability_check, step
from .inverse import OptimConfig, RecoveryResult, TwoLayerModel, beam_core, detect_metal, recover, recover_two_layer
from .io import RunConfig, read_bundle, write_bundle

__version__ = "0.1.0"
