"""Population-size nowcasts from incomplete multiple-systems data."""

__version__ = "0.1.0"
