"""Laser-observation DRL motion planning for industrial arms, with sampling baselines."""

__version__ = "0.1.0"
