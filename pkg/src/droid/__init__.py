"""Driver-centric risk object identification on synthetic driving scenarios."""

__version__ = "0.1.0"
