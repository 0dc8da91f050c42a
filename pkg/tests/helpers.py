"""Builders shared by the test modules."""
import numpy as np

from app.models import CACHED_STEPS, Embedding, EmbeddingKind, LatentState, Request
from app.services.workload import synth_latents, to_request


def integer_latents(rng, frames=6, shape=(3, 3, 2), steps=CACHED_STEPS):
    """Latents with small integer values, so float32 arithmetic on them is exact."""
    return [
        LatentState(step=step,
                    frames=rng.integers(-8, 9, size=(frames,) + shape).astype(np.float32))
        for step in steps
    ]


def make_embedding(values, kind=EmbeddingKind.WHOLE):
    return Embedding.normalized(np.asarray(values, dtype=np.float64), kind)


def make_request(prompt, whole, obj=None, background=None, latent_seed=0):
    """Request from raw vectors; object and background default to the whole vector."""
    obj = whole if obj is None else obj
    background = whole if background is None else background
    return Request(
        prompt=prompt,
        arrival=prompt,
        whole=make_embedding(whole, EmbeddingKind.WHOLE),
        object=make_embedding(obj, EmbeddingKind.OBJECT),
        background=make_embedding(background, EmbeddingKind.BACKGROUND),
        latent_seed=latent_seed,
    )


def requests_for(trace):
    return [to_request(record, dim=trace.spec.embed_dim, seed=trace.spec.seed)
            for record in trace]


def synth(spec, seed=0):
    return synth_latents(seed, spec)
