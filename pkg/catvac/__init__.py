"""
catvac: categorical unsupervised variational acoustic clustering.

Audio feature pipeline, Gumbel-Softmax categorical VAE, K-means baseline and
clustering evaluation suite.
"""

__version__ = "0.1.0"
