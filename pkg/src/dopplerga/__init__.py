"""Gestational-age estimation from 1D Doppler ultrasound audio."""

__version__ = "0.1.0"
