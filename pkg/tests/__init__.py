"""Tests for the gridflux package."""
