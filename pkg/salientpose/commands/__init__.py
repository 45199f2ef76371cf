# salientpose/commands/__init__.py
"""Click commands, one module per command family."""
