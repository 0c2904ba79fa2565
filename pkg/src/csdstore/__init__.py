"""Page store on a simulated compressing SSD.

Layers, bottom up: ``csd`` (device with per-block deflate and a
log-structured FTL), ``codec`` (software page compression), ``space``
(allocators, index, WAL), ``chunk`` (replicated page store with redo
logging) and ``scheduler`` (cluster placement simulator).
"""

from .chunk import ChunkStore
from .codec import Algorithm, compress_page
from .config import EngineConfig, load_config
from .csd import CsdDevice, DeviceConfig, EntryFormat
from .space import WriteMode

__all__ = ["Algorithm", "ChunkStore", "CsdDevice", "DeviceConfig", "EngineConfig",
           "EntryFormat", "WriteMode", "compress_page", "load_config"]
