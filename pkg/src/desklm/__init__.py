"""desklm: a desk-scale laboratory for low-resource masked-LM pretraining.

Pipeline stages: build word-budgeted corpora from several data types,
train a subword vocabulary, pretrain a small transformer encoder with MLM
(optionally plus decoder-based auxiliary objectives), and evaluate
grammatical preference on minimal pairs.
"""

__version__ = "0.1.0"
