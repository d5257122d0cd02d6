"""
quantkern - quantized LLM kernels and runtime for the WebGPU device model.
"""
__version__ = '0.1.0'
