"""Calibratable discrete-event simulation of a multi-room ultrasound center."""

__version__ = "0.1.0"
