"""Discrete-event simulator of hypervisor microreboot recovery under injected faults."""

__version__ = "0.1.0"
