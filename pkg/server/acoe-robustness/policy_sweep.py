"""
Chunked sweep over every deterministic stationary policy of a finite model.

Chunks run on a thread pool (numpy releases the GIL in matmul); results come
back in chunk order whatever the completion order, so reductions stay
deterministic.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

from config import (ENABLE_PARALLEL_PROCESSING, MAX_WORKERS, POLICY_BATCH_SIZE,
                    POLICY_BUDGET, PROGRESS_EVERY, SHOW_PROGRESS)
from errors import BudgetError
from mdp_core import FiniteMdp, StationaryPolicy

logger = logging.getLogger(__name__)

R = TypeVar('R')

# bound on B * S^3 floats held by one chunk's pairwise row differences
_CHUNK_CELLS = 1 << 22


def policy_count(mdp: FiniteMdp) -> int:
    return mdp.n_actions ** mdp.n_states


def check_budget(mdp: FiniteMdp, budget: int = POLICY_BUDGET) -> int:
    """Return |U|^|X|, raising BudgetError if it exceeds the budget."""
    count = policy_count(mdp)
    if count > budget:
        logger.error(f"Policy enumeration of {count} policies exceeds budget {budget}")
        raise BudgetError(count, budget)
    return count


def policy_choices(n_states: int, n_actions: int, start: int, stop: int) -> np.ndarray:
    """
    Policies with lexicographic indices start..stop-1 as a (B x S) action array.

    Index i has state 0 as its most significant digit, so increasing index is
    increasing lexicographic order of the action tuples.
    """
    indices = np.arange(start, stop, dtype=np.int64)
    choices = np.empty((indices.size, n_states), dtype=np.int64)
    for state in range(n_states - 1, -1, -1):
        choices[:, state] = indices % n_actions
        indices = indices // n_actions
    return choices


def policy_at(mdp: FiniteMdp, index: int) -> StationaryPolicy:
    return StationaryPolicy(policy_choices(mdp.n_states, mdp.n_actions, index, index + 1)[0])


class PolicySweep:
    """
    Runs a function over chunks of Γ_s, maximizing worker use without waiting
    for whole batches.
    """

    def __init__(self, mdp: FiniteMdp, budget: int = POLICY_BUDGET,
                 batch_size: int = POLICY_BATCH_SIZE, max_workers: int = MAX_WORKERS):
        self.mdp = mdp
        self.total_count = check_budget(mdp, budget)
        cells = max(1, mdp.n_states ** 3)
        self.batch_size = max(1, min(batch_size, _CHUNK_CELLS // cells))
        self.max_workers = max(1, max_workers)
        self.completed_count = 0
        self.progress_lock = threading.Lock()

    def chunks(self) -> List[range]:
        return [range(start, min(start + self.batch_size, self.total_count))
                for start in range(0, self.total_count, self.batch_size)]

    def run(self, chunk_fn: Callable[[np.ndarray, int], R]) -> List[R]:
        """
        Apply chunk_fn(choices, first_index) to every chunk.

        Args:
            chunk_fn: receives the (B x S) action array of a chunk and the
                lexicographic index of its first policy

        Returns:
            The chunk results, ordered by chunk start.
        """
        chunks = self.chunks()
        start_time = time.time()
        self.completed_count = 0

        def work(chunk: range):
            choices = policy_choices(self.mdp.n_states, self.mdp.n_actions, chunk.start, chunk.stop)
            result = chunk_fn(choices, chunk.start)
            with self.progress_lock:
                self.completed_count += 1
                done = self.completed_count
            if SHOW_PROGRESS and len(chunks) > 1 and (done % PROGRESS_EVERY == 0 or done == len(chunks)):
                elapsed = time.time() - start_time
                logger.info(f"Policy sweep progress: {done}/{len(chunks)} chunks "
                            f"in {elapsed:.2f}s")
            return result

        if not ENABLE_PARALLEL_PROCESSING or len(chunks) == 1 or self.max_workers == 1:
            return [work(chunk) for chunk in chunks]

        workers = min(self.max_workers, len(chunks))
        with ThreadPoolExecutor(max_workers=workers) as executor:
            # map preserves submission order
            results = list(executor.map(work, chunks))

        processing_time = time.time() - start_time
        logger.info(f"Policy sweep completed: {self.total_count} policies in {len(chunks)} chunks, "
                    f"{processing_time:.2f}s")
        return results
