"""Probabilistic sector congestion: quadrature and Monte-Carlo backends."""
