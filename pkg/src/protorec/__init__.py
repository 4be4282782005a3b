"""Cross-domain recommendation pre-training over a shared entity graph.

Entities are embedded by a graph attention encoder, users by multi-interest
attention enriched with learnable prototypes, and the pre-trained towers
transfer to new domains either zero-shot (inner products) or through small
fine-tuned heads.
"""

__version__ = "0.1.0"
