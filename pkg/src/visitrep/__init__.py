"""visitrep: patient visit representations learned from scratch.

The package turns longitudinal visit records (diagnosis / procedure /
medication codes plus clinical note text) into fixed-width per-visit
vectors: a causally masked self-attention encoder trained with a
visit-level skip-gram objective covers the code history, a recurrent
autoencoder summarizes the note text, and a one-hot block covers
demographics. Downstream heads and an evaluation harness sit on top,
and a synthetic cohort generator with planted structure makes the
whole pipeline verifiable end to end.
"""

__version__ = "0.1.0"
