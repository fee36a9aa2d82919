"""Simulated human-to-robot imitation: demonstration priors, residual CVAE policies and
agent-agnostic alignment costs optimized by iterated elite fitting."""

__version__ = "0.1.0"
