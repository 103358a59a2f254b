"""Early-stage behavioural malware prediction with stacked GRU ensembles."""

__version__ = "0.1.0"
