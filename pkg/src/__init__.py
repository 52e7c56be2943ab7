"""
patchalign
Patch-level real/synthetic alignment for caption grounding
"""

__version__ = "1.0.0"
