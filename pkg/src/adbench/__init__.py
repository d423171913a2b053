"""FDG-PET Alzheimer's classification benchmark at desk scale."""
__version__ = "0.1.0"
