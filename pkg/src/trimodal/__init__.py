"""Desk-scale tri-modal pretraining and evaluation engine.

Subpackages/modules:
  numerics   float64 autodiff core, attention, Adam, gradient oracle
  encoders   slide/gene/text encoders with aggregation
  fusion     shared-attention + modality-expert transformer
  pretrain   masking, contrastive and triplet objectives, training loop
  tasks      survival/classification/report heads and losses
  metrics    C-index, AUC, F1, BLEU, ROUGE-L
  data       synthetic planted-structure cohorts, serialization, splits
  cli        gen / pretrain / finetune / eval / gradcheck
"""

__version__ = "0.1.0"
