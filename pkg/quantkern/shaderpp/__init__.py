"""
Shader template preprocessing module.
"""
