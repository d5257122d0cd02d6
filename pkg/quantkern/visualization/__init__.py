"""
Visualization module for creating benchmark charts.
"""
