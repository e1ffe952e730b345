"""Command-line runner for the rsc engine."""
