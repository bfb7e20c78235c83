"""
Command line and fixture generation scripts.
"""
