"""Deterministic CacheOut simulator and experiment harness."""

from ._cacheout import (
    LFB_ENTRIES,
    LINE_SIZE,
    NUM_SETS,
    NUM_WAYS,
    PAGE_SIZE,
    Machine,
    SimulationError,
    aes_expand_key,
    aes_locate,
    attack,
    dump_page,
    generate_rsa_key,
    replay,
    rsa_reconstruct,
    scenarios,
    stitch,
    sweep,
    sweep_csv,
)

__all__ = [
    "LFB_ENTRIES",
    "LINE_SIZE",
    "NUM_SETS",
    "NUM_WAYS",
    "PAGE_SIZE",
    "Machine",
    "SimulationError",
    "aes_expand_key",
    "aes_locate",
    "attack",
    "dump_page",
    "generate_rsa_key",
    "replay",
    "rsa_reconstruct",
    "scenarios",
    "stitch",
    "sweep",
    "sweep_csv",
]
