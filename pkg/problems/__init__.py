"""
Model problems: elliptic coefficient inversion and advection-diffusion source inversion.
"""
