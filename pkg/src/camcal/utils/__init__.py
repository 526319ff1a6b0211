"""Utility modules for camcal."""
