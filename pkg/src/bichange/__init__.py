"""Bi-temporal open-vocabulary change detection at desk scale.

A from-scratch float64 stack: explicit-graph reverse-mode tensor core, a
seeded mock feature backbone, the trainable change head, the training loop
and losses, change-map/semantic composition, evaluation metrics, dataset
tooling, and a CLI front end.
"""

__version__ = "0.1.0"
