"""Task data, optimiser, single runs and the experiment protocols."""
