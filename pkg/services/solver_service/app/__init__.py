"""Narrow-stencil HJB solver package."""
