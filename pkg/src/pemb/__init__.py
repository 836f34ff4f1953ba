"""Instruction-conditioned soft prompts for a frozen embedding LM, at desk scale."""

__version__ = "0.1.0"
