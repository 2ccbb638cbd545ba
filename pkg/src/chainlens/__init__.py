"""chainlens: Bitcoin transaction-graph forensics.

Address clustering, entity graphs, temporal features, heavy-tailed fits and
unsupervised suspect detection over a window of Bitcoin transactions.
"""
__version__ = "0.1.0"
