"""Per-class pipeline cache of margin-admitted embeddings.

Embeddings whose margin clears the threshold are queued under their class.
Once a queue holds `capacity_m` entries it can be drained as a set of
same-class negatives. `drain_and_clear` empties the queue on drain and
refuses admissions into a full queue, so occupancy always equals
admitted - drains * m. `sliding_window` keeps the queue on drain and
evicts the oldest entry on each new admission.
"""
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Deque, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from .errors import ContractError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class CacheMode(str, Enum):
    DRAIN_AND_CLEAR = "drain_and_clear"
    SLIDING_WINDOW = "sliding_window"


class CacheConfig(BaseModel):
    capacity_m: int = Field(8, ge=1)
    delta: float = Field(0.1, gt=0)
    mode: CacheMode = CacheMode.DRAIN_AND_CLEAR


@dataclass(frozen=True, eq=False)
class CacheEntry:
    embedding: np.ndarray
    sample_id: int
    step_enqueued: int


@dataclass
class ClassStats:
    occupancy: int = 0
    admitted: int = 0
    rejected: int = 0
    drains: int = 0
    evicted: int = 0


class ClassQueue:
    """FIFO for one class; never holds more than `capacity` entries."""

    def __init__(self, class_id: int, capacity: int):
        self.class_id = class_id
        self.capacity = capacity
        self.entries: Deque[CacheEntry] = deque()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity


class PipelineCache:
    """One ClassQueue per class plus monotone admission/drain counters."""

    def __init__(self, num_classes: int, config: CacheConfig):
        if num_classes < 1:
            raise ContractError(f"cache needs at least one class, got {num_classes}")
        self.config = config
        self.queues: List[ClassQueue] = [ClassQueue(k, config.capacity_m) for k in range(num_classes)]
        self._stats: List[ClassStats] = [ClassStats() for _ in range(num_classes)]

    @property
    def num_classes(self) -> int:
        return len(self.queues)

    def _queue(self, class_id: int) -> ClassQueue:
        if not 0 <= class_id < len(self.queues):
            raise ContractError(f"unknown class_id {class_id}; cache holds 0..{len(self.queues) - 1}")
        return self.queues[class_id]

    def push(self, class_id: int, emb: np.ndarray, step: int, sample_id: int = -1) -> bool:
        """Admit without a margin check.

        A full queue drops its oldest entry first in `sliding_window` mode. In
        `drain_and_clear` mode a full queue must be drained before it takes
        more, so the entry is counted as rejected and False is returned.
        """
        queue = self._queue(class_id)
        stats = self._stats[class_id]
        emb = np.array(emb, dtype=np.float64)
        if abs(float(np.linalg.norm(emb)) - 1.0) > UNIT_TOL:
            raise ContractError(f"cache entries must be unit-norm, got norm {np.linalg.norm(emb):.6g}")
        if queue.full:
            if self.config.mode is CacheMode.DRAIN_AND_CLEAR:
                stats.rejected += 1
                return False
            queue.entries.popleft()
            stats.evicted += 1
        # cached negatives are detached snapshots
        queue.entries.append(CacheEntry(emb, int(sample_id), int(step)))
        stats.admitted += 1
        return True

    def enqueue_if_margin(self, class_id: int, emb: np.ndarray, rho, step: int, sample_id: int = -1) -> bool:
        """Admit `emb` iff rho > delta (and, in drain_and_clear mode, the queue has room)."""
        queue = self._queue(class_id)
        if float(rho) > self.config.delta:
            return self.push(queue.class_id, emb, step, sample_id)
        self._stats[class_id].rejected += 1
        return False

    def drain_ready(self, class_id: int) -> Optional[List[CacheEntry]]:
        """Return all `capacity_m` entries when the queue is full, else None."""
        queue = self._queue(class_id)
        if not queue.full:
            return None
        entries = list(queue.entries)
        if self.config.mode is CacheMode.DRAIN_AND_CLEAR:
            queue.entries.clear()
        self._stats[class_id].drains += 1
        return entries

    def occupancy(self) -> int:
        return sum(len(q) for q in self.queues)

    def stats(self) -> Dict[int, ClassStats]:
        out = {}
        for q, s in zip(self.queues, self._stats):
            out[q.class_id] = ClassStats(len(q), s.admitted, s.rejected, s.drains, s.evicted)
        return out

    def stats_json(self) -> str:
        return json.dumps({str(k): asdict(v) for k, v in self.stats().items()}, sort_keys=True)

    def snapshot(self) -> Dict[int, List[tuple]]:
        """Hashable view of every queue, for replay comparisons."""
        return {q.class_id: [(e.sample_id, e.step_enqueued, e.embedding.tobytes()) for e in q.entries]
                for q in self.queues}


def cache_stats(cache: PipelineCache) -> Dict[int, ClassStats]:
    return cache.stats()


def negatives_for(entries: List[CacheEntry], anchor_id: int) -> np.ndarray:
    """Drained embeddings minus the anchor's own entry, as an (k, d) matrix (k may be 0)."""
    kept = [e.embedding for e in entries if e.sample_id != anchor_id]
    if not kept:
        return np.empty((0, entries[0].embedding.shape[0] if entries else 0))
    return np.stack(kept)


def mean_staleness(entries: List[CacheEntry], step: int) -> float:
    if not entries:
        return 0.0
    return float(np.mean([step - e.step_enqueued for e in entries]))

