"""Crystal image analysis with 3D synchrosqueezed wave packet transforms."""

__version__ = "0.1.0"
