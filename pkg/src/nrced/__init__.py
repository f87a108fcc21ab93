"""Encoder-decoder mapping intracardiac electrograms to the surface ECG."""

__version__ = "0.1.0"
