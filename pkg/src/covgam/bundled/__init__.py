"""Bundled desk-scale scenario and transform configurations."""

from importlib import resources


def path(name: str):
    """Filesystem path of a bundled configuration file."""
    return resources.files(__package__) / name
