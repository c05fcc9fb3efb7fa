"""Dual contrastive learning (DCLGAN / SimDCL) for unpaired image translation."""

__version__ = "0.1.0"
