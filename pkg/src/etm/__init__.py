"""Continual unsupervised domain adaptation for semantic segmentation.

A shared segmentation network is adapted to a sequence of unlabeled target
domains. Each domain gets a small additive memory module that is frozen once
the domain is finished, adversarial alignment uses a double-hinge loss, and
distillation against a snapshot of the previous network limits drift.
"""
__version__ = "0.1.0"
