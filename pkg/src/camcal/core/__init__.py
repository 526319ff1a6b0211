"""Core modules for camcal"""
