"""Workflow model: path expressions, positions, prompt templates, envelopes."""
