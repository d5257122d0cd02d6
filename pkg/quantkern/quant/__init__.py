"""
Quantization module with CPU reference block codecs.
"""
