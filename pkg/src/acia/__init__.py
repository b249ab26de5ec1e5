"""Anti-causal invariant abstractions: exact finite-SCM kernels, interventions,
synthetic multi-environment benchmarks and a two-level invariant learner."""

__version__ = "0.1.0"
