"""Command-line orchestration."""
