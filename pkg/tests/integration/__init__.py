"""
tests/integration/__init__.py

Integration tests: command line runs on the shipped configs.
"""
