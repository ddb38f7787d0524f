"""Bounded process pool for per-utterance jobs with ordered results."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable

_STATE: dict = {}


def _init(setup: Callable, args: tuple) -> None:
    _STATE.clear()
    _STATE.update(setup(*args))


def _call(job):
    fn, item = job
    return fn(_STATE, item)


def map_ordered(fn: Callable, items: Iterable, workers: int, setup: Callable, setup_args: tuple = ()) -> list:
    """Apply ``fn(state, item)`` to every item; results come back in input order.

    ``setup(*setup_args)`` builds the read-only state once per worker (once in
    process when ``workers <= 1``). ``fn`` and ``setup`` must be module-level
    functions so they can be sent to worker processes.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        state = setup(*setup_args)
        return [fn(state, item) for item in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init, initargs=(setup, setup_args)) as pool:
        return list(pool.map(_call, [(fn, item) for item in items], chunksize=max(1, len(items) // (4 * workers))))
