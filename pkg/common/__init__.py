"""Shared run plumbing: settings, retrying downloads, logging and exit codes."""

__version__ = "1.0.0"
