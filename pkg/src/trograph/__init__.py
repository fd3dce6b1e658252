"""Graph-diffusion grasp synthesis over object/link pose graphs."""

__version__ = "0.1.0"
