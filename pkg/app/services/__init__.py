# Services module
from app.services.cache_store import CacheStore
from app.services.codec import CompressedEntry, compress_latents, decompress_step
from app.services.engine import CacheEngine, EngineSettings, Mode
from app.services.replacement_policies import PolicyName
from app.services.simulator import bench_policies, codec_report, simulate
from app.services.vector_index import VectorIndex

__all__ = [
    'CacheStore',
    'CompressedEntry',
    'compress_latents',
    'decompress_step',
    'CacheEngine',
    'EngineSettings',
    'Mode',
    'PolicyName',
    'bench_policies',
    'codec_report',
    'simulate',
    'VectorIndex',
]
