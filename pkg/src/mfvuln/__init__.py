"""Desk-scale lab for probing which agents make a cooperative swarm fragile."""

__version__ = "0.1.0"
