"""Batch active learning with a set-building generative flow network.

The sampler builds a query batch one pool index at a time and is trained so
that complete batches are drawn in proportion to exp(JMI / T), where JMI is
the closed-form joint mutual information of an exact Gaussian process.
"""

__version__ = "0.1.0"
