"""
Captioner module - MFSC documents and caption generation.
"""
