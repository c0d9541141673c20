"""Self-supervised pretraining benchmark for single-channel EEG sleep staging."""

__version__ = "0.1.0"
