"""Deterministic data-parallel state partitioning simulator.

Modules:

* ``numerics``: software binary16 casts and seeded randomness
* ``model``: tanh MLP workload with analytic gradients
* ``collectives``: reduce-scatter, all-gather, broadcast with volume counters
* ``mpadam``: mixed-precision Adam over one partition
* ``zerodp``: the four stage engines and the equivalence harness
* ``planner``: closed-form memory and communication model
* ``fragsim``: heap fragmentation simulator
* ``cli``: command-line front end
"""

from .planner import STAGES, Stage

__version__ = "0.1.0"

__all__ = ["STAGES", "Stage", "__version__"]
