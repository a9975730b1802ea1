"""Composable soft prompts for multi-attribute controlled generation."""

__version__ = "0.1.0"
