"""Knowledge-graph-augmented multi-hop reading for drug-drug interaction prediction."""

__version__ = "0.1.0"
