"""
tests/unit/__init__.py

Unit tests, one suite per module.
"""
