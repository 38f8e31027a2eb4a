"""moelab: a desk-scale Mixture-of-Experts training laboratory.

Implements micro-batch, global-batch (synchronized), buffered, shuffled, and
auxiliary-loss-free load-balancing strategies under simulated data
parallelism, with specialization analytics over synthetic multi-domain
corpora.
"""

__version__ = "0.1.0"
