"""
Utility module for logging setup shared by the CLI and scripts.
"""
