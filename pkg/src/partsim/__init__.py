"""Instrument-part music similarity embeddings.

A single convolutional encoder maps a mel spectrogram to one embedding whose
five equal slices correspond to drums, bass, piano, guitar and remaining
instruments. Similarity conditioned on one instrument is the Euclidean
distance between the matching slices.
"""

__version__ = "0.1.0"

INSTRUMENTS = ("drums", "bass", "piano", "guitar", "others")
