"""Small tail probabilities from samples with no exceedances, by repeated
fusion with uniform samples under a density ratio model."""

__version__ = "0.1.0"
