"""mictsim: multi-modality minimally invasive cancer treatment simulation."""

__version__ = "0.1.0"
