"""capforge: audio captioning with a CNN10 encoder and a BERT-style decoder."""

__version__ = "0.1.0"
