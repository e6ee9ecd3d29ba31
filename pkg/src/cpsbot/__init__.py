"""Simulator of a pub-sub coordinated cyber-physical botnet attacking a
centrally controlled, Modbus/TCP water-distribution system."""

__version__ = "0.1.0"
