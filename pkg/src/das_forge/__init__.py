"""Phase-OTDR vibration event simulation, demodulation and two-stage
CNN + Bi-LSTM classification in pure numpy."""

__version__ = "0.1.0"
