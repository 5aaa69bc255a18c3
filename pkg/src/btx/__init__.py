"""Desk-scale neural MT workbench.

Subword segmentation, an attentional encoder-decoder trained with plain
SGD, monolingual-data strategies (dummy-source mixing and back-translation
into synthetic parallel data), beam/ensemble decoding, and evaluation
tooling, all on numpy.
"""

__version__ = "0.1.0"
