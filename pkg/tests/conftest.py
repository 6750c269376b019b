import contextlib

import numpy as np
import pytest

from minishmem import WorldSpec, init_world


@contextlib.contextmanager
def make_world(world_size, n_nodes=1, *, heap_bytes=1 << 18, scheduler="free",
               seed=0, timeout_s=5.0, signal_count=None):
    spec = WorldSpec(world_size=world_size, n_nodes=n_nodes, heap_bytes=heap_bytes,
                     timeout_s=timeout_s, signal_count=signal_count)
    world = init_world(spec, scheduler=scheduler, seed=seed)
    try:
        yield world
    finally:
        world.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
