"""Backwards compatibility setup.py for flowpref."""

from setuptools import setup

# For backwards compatibility only
# All configuration is in pyproject.toml
setup()
