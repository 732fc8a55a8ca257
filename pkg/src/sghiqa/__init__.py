"""Scale-guided hypernetwork for blind super-resolution image quality assessment."""

__version__ = "0.1.0"
