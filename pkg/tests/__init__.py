"""Tests for camcal."""
