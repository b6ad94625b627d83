"""Unit test package for flowtopo."""
