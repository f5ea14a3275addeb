"""Text-to-image generation steered by a reference image."""
