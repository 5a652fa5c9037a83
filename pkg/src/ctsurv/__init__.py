"""Survival modelling from CT-derived features.

Feature tables and outcomes in, elastic-net Cox models with batch
harmonization, stability selection and survival metrics out. See the
``demos/`` scripts for worked examples.
"""

__version__ = "0.1.0"
