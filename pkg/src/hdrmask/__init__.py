"""Single-image HDR reconstruction with feature-masked convolutions.

Takes a display-referred LDR image, estimates the missing radiance in its
saturated regions with a small masked U-Net, and composes the result with
the well-exposed content into a linear HDR image. Ships with the full
desk-scale training harness: inpainting pre-training, HDR fine-tuning,
textured-patch sampling, and bit-exact file formats.
"""

__version__ = "0.1.0"
