"""flowrl: distributional RL with flow-matching return critics on toy MDPs."""

__version__ = "0.1.0"
