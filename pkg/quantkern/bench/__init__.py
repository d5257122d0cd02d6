"""
Benchmarking, verification, tuning and clustering module.
"""
