"""Desk-scale single-shot face detection, trained and verified on CPU.

The package is a complete pipeline: a float64 reverse-mode tensor engine
(:mod:`deskface.tensor`), default-box geometry and matching
(:mod:`deskface.geometry`), the mined multi-task objective
(:mod:`deskface.loss`), a configurable encoder-decoder detector with
context fusion (:mod:`deskface.network`), receptive-field calculus
(:mod:`deskface.receptive`), data synthesis and augmentation
(:mod:`deskface.data`), detection metrics (:mod:`deskface.evaluate`),
and the SGD harness with bit-exact checkpoints (:mod:`deskface.train`,
:mod:`deskface.checkpoint`).  The ``deskface`` CLI fronts all of it.
"""

__version__ = "0.1.0"
