"""Energy prediction for parallelized transformer inference over expanded model trees."""

__version__ = "0.1.0"
