"""Test suite for ecrl."""
