"""Trace mining, expression synthesis and per-role length profiles."""
