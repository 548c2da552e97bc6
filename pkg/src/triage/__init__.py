"""Multi-agent interactive medical triage system."""

__version__ = "0.1.0"
