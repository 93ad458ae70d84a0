"""
Bayesian inversion flow for PDE model problems.
"""
