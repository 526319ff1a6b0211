"""CLI commands for camcal."""
