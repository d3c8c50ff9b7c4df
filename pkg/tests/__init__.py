"""Test suite for flowpref."""
