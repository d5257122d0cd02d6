"""
Kernel library module: specialization, pipeline cache and kernel corpus.
"""
