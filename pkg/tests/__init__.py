"""Tests for bspde-mc package."""
