"""OCT-to-CCTA label transfer and sequence classification of coronary plaque."""

__version__ = "0.1.0"
