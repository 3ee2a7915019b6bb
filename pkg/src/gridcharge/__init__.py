"""Decentralized EV smart charging on radial LV feeders.

EV agents learn daily charging schedules with combinatorial linear Thompson
Sampling while line and bus agents flood criticality requests that keep
currents and voltages within limits.
"""

__version__ = "0.1.0"
