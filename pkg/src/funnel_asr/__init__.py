"""Sequence transduction toolkit: CTC and HAT transducers over a funnel-pooled Conformer."""

__version__ = "0.1.0"
