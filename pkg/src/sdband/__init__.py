"""Multi-band spectrogram detection of spreading depolarizations in ECoG."""

__version__ = "0.1.0"
