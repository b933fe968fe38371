"""Three-layer hierarchical scene graphs (objects, regions, rooms) learned with a set transformer."""

__version__ = "0.1.0"
