"""VUT-conditioned inference of background traffic, with a distributional driving cost and closed-loop rollouts."""

__version__ = "0.1.0"
