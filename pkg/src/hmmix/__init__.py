"""Center estimation in the binary hidden-Markov sub-Gaussian mixture model."""

from .estimators import (VARIANTS, Estimate, RateQuery, adaptive_known_delta, ell_double_star,
                         ell_star, estimate, estimate_known_delta, estimate_plain, g_of_delta,
                         global_rate, lepski_grid, lepski_refined, lepski_select, phi_rate,
                         vanilla_spectral, worst_case_norm_sq)
from .model import (DomainError, Dataset, LabelPath, ModelConfig, Noise, flip_even,
                    gen_dataset, gen_labels, gen_noise, make_rng, make_theta)
from .spectral import (BucketMatrix, EigenPair, SigmaHat, bucketize, gram, sign_loss,
                       sq_sign_loss, top_eigenpair)

__version__ = "0.1.0"
