"""Simulator for communication-efficient distributed and federated optimization.

Components:

- ``datasets``     LibSVM parsing, synthetic problems, client partitioning
- ``problems``     finite-sum objectives with per-client oracles and constants
- ``compressors``  the compressor zoo with certified (eta, omega) parameters
- ``efbv``         error-feedback algorithm family (bias/variance scalings)
- ``scafflix``     personalized local-training algorithms on the mixture objective
- ``sppm``         stochastic proximal point with arbitrary cohort sampling
- ``harness``      experiment configs, deterministic traces, sweeps
"""

__version__ = "0.1.0"
