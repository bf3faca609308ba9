"""Desk-scale scientific multimodal instruction tuning.

Pipeline: corpus synthesis/ingestion -> instruction assembly -> two-stage
training of a frozen-encoder model with a trainable linear multimodal
adapter -> structured generation -> evaluation.
"""

__version__ = "0.1.0"
