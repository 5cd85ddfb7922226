"""Deep-learning pilot, limited-feedback and precoder design for FDD
multi-user MIMO downlinks, with the classical baselines it is measured
against."""

__version__ = "0.1.0"
