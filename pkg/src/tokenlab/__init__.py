"""tokenlab: a desk-scale lab for token-sparsifying vision transformers.

Pieces: a numpy-backed reverse-mode autodiff engine, a small vision
transformer with per-block sparsifier hooks, three token-sparsification
mechanisms, a PGD-based token-exhaustion attack with baselines and
reusable-perturbation variants, analytic efficiency metrics, a token-budget
defense, and a CLI harness for end-to-end experiments.
"""

__version__ = "0.1.0"
