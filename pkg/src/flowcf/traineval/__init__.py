"""Synthetic sequences, toy end-to-end training and OTB-style metrics."""
