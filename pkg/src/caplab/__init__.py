"""Desk-scale controllable captioning lab.

Two-stream recurrent encoding with cross-modal residual gating, a syntax
sequence generator whose final hidden state steers a hierarchical word
decoder, cross-entropy and self-critical training stages, and a small
serving layer for interactive tag editing.
"""

__version__ = "0.1.0"
