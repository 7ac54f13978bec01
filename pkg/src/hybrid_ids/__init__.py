"""Graph-convolutional, recurrent and attention-based intrusion detection on flow records."""

__version__ = "1.0.0"
