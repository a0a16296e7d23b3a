"""Hash-grid radiance field with instance-mask channels, trained on CPU to recover depth of transparent objects."""

__version__ = "0.1.0"
