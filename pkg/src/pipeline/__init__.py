"""
Pipeline Module
"""

