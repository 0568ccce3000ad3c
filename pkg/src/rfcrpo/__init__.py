"""Desk-scale rectified flows with reward-ranked preference optimisation (CRPO).

Modules: ``numkit`` (seeded RNG, small linear algebra), ``vectorfield`` (MLP
velocity field, AdamW, checkpoints), ``flow`` (paths, flow-matching loss,
guided Euler sampler), ``preference`` (DPO-FM and CRPO losses), ``reward``
(proxy rewards, best-of-N), ``synthdata`` (synthetic tasks), ``crpo`` (the
alignment loop), ``metrics`` (objective proxies and subjective statistics),
``cli`` (command-line entry point).
"""

__version__ = "0.1.0"
