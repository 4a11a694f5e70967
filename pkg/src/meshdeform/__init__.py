"""Template mesh deformation network with graph convolutions on sphere templates."""

__version__ = "0.1.0"
