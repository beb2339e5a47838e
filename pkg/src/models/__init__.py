"""
Models Module
"""
