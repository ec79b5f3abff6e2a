"""SD-map encoding, BEV fusion and lane-topology evaluation toolkit."""

__version__ = "0.1.0"
