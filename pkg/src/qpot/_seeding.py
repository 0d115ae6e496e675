"""Counter-based seed splitting.

A run has one master seed. Each parallel unit (replication, x value, panel
cell) and each random stream inside it gets a child ``SeedSequence`` whose
spawn key is the tuple of integer counters naming it, so streams never depend
on execution order.
"""
from __future__ import annotations

import numpy as np

STREAMS = {"arrivals": 0, "services": 1, "initial": 2, "bound": 3, "misc": 4}

SPLIT_RULE = "SeedSequence(master, spawn_key=(unit, stream))"


def child_seed(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))


def rng_for(master: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(master, *key)))


def stream(master: int, name: str, unit: int = 0) -> np.random.Generator:
    return rng_for(master, unit, STREAMS[name])
