"""
GGUF module for reading, writing and streaming model containers.
"""
