"""Shipped preset files (rates.cfg, spad.cfg)."""
