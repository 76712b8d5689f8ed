"""belief-search - object search in grid worlds with Dirichlet belief maps."""

__version__ = "0.1.0"
