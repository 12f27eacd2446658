"""Region- and point-weighted local features for indoor visual localization."""

__version__ = "0.1.0"
