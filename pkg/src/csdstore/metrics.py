from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, fields


def format_record(kind: str, items) -> str:
    """One machine-readable record: ``kind`` then tab-separated key=value pairs."""
    parts = [kind]
    for k, v in items:
        if isinstance(v, float):
            v = f"{v:.6f}"
        parts.append(f"{k}={v}")
    return "\t".join(parts)


@dataclass
class Metrics:
    """Monotone per-operation counters collected by the chunk store."""

    device_reads: int = 0
    device_writes: int = 0
    bytes_in: int = 0  # logical bytes accepted from callers
    bytes_out: int = 0  # logical bytes returned to callers
    codec_compress_calls: int = 0
    codec_decompress_calls: int = 0
    decompress_us: float = 0.0
    pages_written: int = 0
    pages_read: int = 0
    redo_records: int = 0
    redo_bytes: int = 0
    log_slot_writes: int = 0
    consolidations: int = 0
    heavy_segment_reads: int = 0
    heavy_blocks_read: int = 0
    algorithms: Counter = field(default_factory=Counter)
    log_reads_per_consolidation: Counter = field(default_factory=Counter)
    blocks_per_page_read: Counter = field(default_factory=Counter)
    errors: Counter = field(default_factory=Counter)
    # filled in at report time
    logical_used: int = 0  # page bytes the caller stored
    device_logical_used: int = 0  # mapped 4 KB blocks on the device
    physical_live: int = 0

    @property
    def compression_ratio(self) -> float:
        return self.logical_used / self.physical_live if self.physical_live else 0.0

    @property
    def device_ratio(self) -> float:
        return self.device_logical_used / self.physical_live if self.physical_live else 0.0

    @property
    def read_amplification(self) -> float:
        """Blocks read per 4 KB of page data returned."""
        reads = sum(k * v for k, v in self.blocks_per_page_read.items())
        pages = sum(self.blocks_per_page_read.values())
        return reads / (pages * 4) if pages else 0.0

    def scalars(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, Counter):
                out[f.name] = v
        out["compression_ratio"] = self.compression_ratio
        out["device_ratio"] = self.device_ratio
        out["read_amplification"] = self.read_amplification
        return out

    def histograms(self) -> dict[str, dict]:
        return {f.name: dict(sorted(getattr(self, f.name).items(), key=lambda kv: str(kv[0])))
                for f in fields(self) if isinstance(getattr(self, f.name), Counter)}
