"""Test package for elattn."""
