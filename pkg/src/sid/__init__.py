"""SID: a minimalist vector-accelerator toolchain and detection-pipeline reference."""

__version__ = "0.1.0"
