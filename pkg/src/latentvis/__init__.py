"""Single-shot latent visual reasoning on a toy vision-language model."""

__version__ = "0.1.0"
