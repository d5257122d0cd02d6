"""
Runtime module for devices, memory planning and graph execution.
"""
