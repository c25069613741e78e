"""Online detection of terrestrial interference in satellite idle-phase snapshots."""

__version__ = "0.1.0"
