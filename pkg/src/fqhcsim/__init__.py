"""Discrete-event simulation of primary-care episodes in FQHC archetypes and a
harness comparing a fee-for-service baseline with a clinician-training pilot."""

__version__ = "0.1.0"
