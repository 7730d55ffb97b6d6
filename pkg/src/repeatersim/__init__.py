"""Monte Carlo simulator of parallelized and time-multiplexed backward-propagating repeater chains."""

__version__ = "0.1.0"
