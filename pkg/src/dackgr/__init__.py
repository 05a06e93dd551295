"""Multi-hop reasoning over sparse knowledge graphs (DacKGR)."""

__version__ = "0.1.0"
