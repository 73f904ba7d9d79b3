"""holovox: 3D generative diffusion over voxel feature grids, supervised
only by posed 2D images through differentiable emission-absorption
rendering."""

__version__ = "0.1.0"
