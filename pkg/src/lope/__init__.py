"""LoPE: noise-robust parameter-efficient adaptation via an asymmetric
low-rank adapter with a dedicated poisoning expert.

The package is organised bottom-up:

- ``numerics``: deterministic dense linear algebra, seeded random streams,
  and the finite-difference gradient oracle.
- ``noise``: hybrid noise injection (discrete token corruption plus bounded
  continuous embedding noise).
- ``adapter``: the LoPE layer itself (gating, stage-wise forwards,
  compensation, analytic backward, masking).
- ``model``: a small frozen backbone with two adapted layers and a softmax
  classifier.
- ``tasks``: synthetic classification tasks with recoverable labels.
- ``training``: the two-stage pipeline, calibration, checkpoints, and the
  gradient-check suite.
- ``experiments`` / ``cli``: ablation studies and the command-line front end.
"""

__version__ = "0.1.0"
