"""Knowledge-free black-box watermarking workbench for image classifiers."""

__version__ = "0.1.0"
