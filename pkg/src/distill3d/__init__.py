"""Single-image 3D reconstruction by score distillation with an object-level adapter.

The package optimises a hash-grid radiance field against diffusion-style
guidance, hands a per-object low-rank adapter from a coarse stage to a
refinement stage, then extracts, textures and refines a triangle mesh.
"""

__version__ = "0.1.0"
