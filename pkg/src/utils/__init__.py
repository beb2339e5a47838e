"""
Utilities Module
"""

