"""Continual-learning rehearsal via gated singular-value updates.

Desk-scale reference implementation: a two-branch toy network, seeded
synthetic task sequences, rehearsal memory policies, the two-stage gated
update method, standard baselines, metrics, and an experiment CLI.
"""

__version__ = "0.1.0"
