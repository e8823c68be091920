"""Bounded-memory probabilistic hash embeddings for streaming categorical
features, with Bayesian online (posterior-to-prior) updates and a
predict-evaluate-update benchmarking harness."""

from .baselines import AdaModel, DeterministicTable, EeModel, PeeModel, VocabMap
from .gaussian_table import (GaussianTable, PriorSnapshot, init_table,
                             kl_to_prior, sample_rows, snapshot, standard_prior)
from .hashing import HashSpec, hash_item, hash_signature, hash_weight
from .inference import (ModelState, PheModel, TrainConfig, advance_stage,
                        elbo_minibatch_loss, fit_initial, fit_online,
                        new_model_state, predict_mc)
from .likelihoods import (CategoricalLinear, GaussianLinear, GaussianMLP,
                          PoissonLinear)
from .phe_encoder import EncoderConfig, RecordLayout, encode, encode_mean

__version__ = "0.1.0"
