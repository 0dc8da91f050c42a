import numpy as np
import pytest
from click.testing import CliRunner

from app import create_app
from app.config import CONFIG_NAME_ENV, CONFIG_PATH_ENV, LOG_LEVEL_ENV, load_run_config
from app.models import MaskSet
from app.services.cache_store import CacheStore
from app.services.engine import CacheEngine, EngineSettings
from app.services.latent_source import SyntheticLatentSource
from app.services.vector_index import VectorIndex
from app.services.workload import LatentSpec, TraceSpec, gen_trace, synth_latents


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in (CONFIG_NAME_ENV, CONFIG_PATH_ENV, LOG_LEVEL_ENV):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """Tiny latents: 8 frames of 4 x 4 x 2."""
    return LatentSpec(frames=8, height=4, width=4, channels=2)


@pytest.fixture
def small_latents(small_spec):
    return synth_latents(11, small_spec)


@pytest.fixture
def run_config():
    return load_run_config('testing')


@pytest.fixture
def make_engine(small_spec):
    """Engine over a fresh store; extra keyword arguments go to EngineSettings."""

    def factory(capacity=64 * 1024 * 1024, policy='lrbu', spec=None, **settings):
        index = VectorIndex()
        store = CacheStore(capacity, policy=policy, check_invariants=True)
        source = SyntheticLatentSource(spec or small_spec)
        return CacheEngine(store, index, source, EngineSettings(**settings))

    return factory


@pytest.fixture
def make_trace():
    def factory(**kwargs):
        kwargs.setdefault('embed_dim', 64)
        return gen_trace(TraceSpec(**kwargs))

    return factory


@pytest.fixture
def full_masks():
    def factory(frames, height, width, value=False):
        obj = np.full((frames, height, width), value, dtype=bool)
        return MaskSet(object_masks=obj, background_masks=~obj)

    return factory


@pytest.fixture
def cli():
    return create_app('testing')


@pytest.fixture
def runner():
    return CliRunner()
