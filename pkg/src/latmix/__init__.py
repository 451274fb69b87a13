"""latmix: multi-instrument longitudinal modeling in a shared latent space.

Per-instrument variational autoencoders embed ordinal item scores into one
latent space, a multivariate linear mixed model captures the temporal and
treatment-switch structure there, and a knockoff-variable bootstrap provides
post-selection-valid likelihood-ratio tests. Item-level switch effects come
from decoding factual versus counterfactual latent predictions.
"""

from .dataio import Dataset, IngestRules, Observation, Patient, ingest, read_dataset, write_dataset
from .effects import EffectReport, effect_study, inject_artificial_switch, switch_effect
from .inference import (BootstrapNull, KnockoffSpec, LrTestResult, bootstrap_null,
                        empirical_cdf, gen_knockoffs, lr_statistic, lr_test, p_value)
from .mlmm import (DesignPair, FitResult, MixedModelData, MixedModelParams, ModelSpec,
                   blue, blup, build_design, fit, loglik_ml, loglik_reml,
                   marginal_covariance, predict)
from .synth import GeneratorConfig, GroundTruth, benchmark_config, desk_config, generate_registry
from .training import JointTrainer, TrainConfig, TrainedModel, fit_joint
from .vae import InstrumentSchema, ItemSpec, VaeParams

__version__ = "0.1.0"
