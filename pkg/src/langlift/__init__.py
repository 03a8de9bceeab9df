"""langlift: a desk-scale language-transfer laboratory.

A micro transformer with low-rank adapters is carried from a synthetic
source language to a synthetic target language through three training
stages (target-language pre-training, bidirectional translation
pre-training, and transformation fine-tuning), then answers
target-language queries by translation chain-of-thought. Because the
world is synthetic with exact oracles, forgetting, recovery, and
transfer are all measurable to the digit.
"""

__version__ = "0.1.0"
