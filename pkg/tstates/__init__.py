"""
Transformational States
Video prediction that separates scene state from the transformation acting on it
"""

__version__ = "0.1.0"
