# Exact-math comparisons on finite tables.
EXACT_TOL = 1e-12
# Accepted slack when validating user-supplied probability tables.
NORMALIZATION_TOL = 1e-9
# A shift larger than this counts as genuine causal dependence.
DEPENDENCE_TOL = 1e-9
