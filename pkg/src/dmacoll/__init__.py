"""Simulator and compiler for DMA-engine-offloaded all-gather / all-to-all collectives."""

__version__ = "0.1.0"
