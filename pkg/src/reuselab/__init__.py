"""reuselab: a desk-scale laboratory for drift-gated activation reuse in
masked diffusion language models.

The package pairs a tiny, fully deterministic transformer with two reuse
strategies (key/value reuse and attention-output reuse), a drift-based
gating policy, a coupled sampler that measures the true cost of reuse, and
a verification harness that checks analytic error bounds against measured
errors on every run.
"""

__version__ = "0.1.0"
