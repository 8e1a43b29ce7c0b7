"""
Derivative-accurate neural surrogates for stochastic pricing functions.

Train an oversized MLP on Monte Carlo data, prune it with interval adjoint
significance analysis, and restore its sensitivities with Sobolev training.
"""
__version__ = "0.1.0"
