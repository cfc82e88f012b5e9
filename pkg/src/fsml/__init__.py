"""Few-shot evaluation over pre-extracted embeddings.

Similarity under a per-class exponential feature model (max log-likelihood),
classic Euclidean/cosine baselines, Gaussian fusion of the three scores, and
a probability-weighted transductive refinement for imbalanced query batches.
"""

__version__ = "0.1.0"
