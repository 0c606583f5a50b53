"""Test package for unittest discovery."""

