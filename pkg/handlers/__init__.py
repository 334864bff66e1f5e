# handlers/__init__.py
"""One module per CLI command; each cmd_* takes the parsed args and returns an exit code."""
