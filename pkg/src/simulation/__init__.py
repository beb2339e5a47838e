"""
Simulation Module
"""
