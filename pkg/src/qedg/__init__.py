"""Query-efficient data-free model stealing laboratory."""
__version__ = "0.1.0"
