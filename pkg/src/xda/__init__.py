"""Cross-domain attention consistency for unsupervised domain adaptation,
at desk scale: a numpy autodiff engine, a tiny transformer segmenter and a
synthetic two-domain benchmark."""

__version__ = "0.1.0"
