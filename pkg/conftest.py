"""
Shared pytest fixtures: small synthetic corpora and hand-built models
"""
import numpy as np
import pytest

from latent_lens.embedding_store import make_split
from latent_lens.sae_core import ReluActivation, SaeConfig, SaeModel, TopKActivation
from latent_lens.synth import PlantedAttribute, SynthSpec, generate


def build_model(enc_weight, dec_weight, enc_bias=None, dec_bias=None, input_mean=None, activation=None):
    """SaeModel from explicit parameters; biases and mean default to zero"""
    enc_weight = np.asarray(enc_weight, dtype=np.float64)
    latent_dim, input_dim = enc_weight.shape
    config = SaeConfig(
        input_dim=input_dim,
        latent_dim=latent_dim,
        activation=activation or ReluActivation(l1_lambda=0.0),
    )
    return SaeModel(
        config=config,
        enc_weight=enc_weight,
        enc_bias=np.zeros(latent_dim) if enc_bias is None else enc_bias,
        dec_weight=dec_weight,
        dec_bias=np.zeros(input_dim) if dec_bias is None else dec_bias,
        input_mean=np.zeros(input_dim) if input_mean is None else input_mean,
    )


@pytest.fixture
def model_factory():
    return build_model


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(
        dim=16,
        n_samples=600,
        n_speakers=20,
        noise_sigma=0.05,
        seed=3,
        attributes=[PlantedAttribute(name="spanish", prevalence=0.4, strength=2.0)],
    )


@pytest.fixture(scope="session")
def small_synth(small_spec):
    return generate(small_spec)


@pytest.fixture(scope="session")
def small_split(small_synth):
    labels = small_synth.labels["spanish"]
    return make_split(small_synth.corpus.count, 0.25, seed=11, label_vector=labels.label_vector(small_synth.corpus))


@pytest.fixture(scope="session")
def strata_synth():
    spec = SynthSpec(
        dim=16,
        n_samples=800,
        n_speakers=20,
        noise_sigma=0.05,
        seed=5,
        attributes=[
            PlantedAttribute(
                name="spanish",
                prevalence=0.4,
                strength=2.0,
                n_subcomponents=2,
                subcomponent_mix=0.4,
                subcomponent_names=["male", "female"],
            ),
        ],
    )
    return generate(spec)


@pytest.fixture
def quick_config(small_spec):
    return SaeConfig(
        input_dim=small_spec.dim,
        latent_dim=24,
        activation=TopKActivation(k=4),
        batch_size=64,
        epochs=3,
        seed=1,
    )
