"""Pretrained mobility transformer on gridded location sequences, in numpy."""

__version__ = "0.1.0"
