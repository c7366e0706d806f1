"""Place recognition for X-band marine radar via elliptical scan shaping."""

__version__ = "0.1.0"
