"""Cooperative vehicular radio SLAM from multipath range/angle observations.

The package simulates a road scene served by a single elevated base
station, synthesizes specular multipath observations, and runs the
cooperative estimation stack: per-vehicle data association against a
shared registry of common virtual transmitters, online learning of the
reflecting facades, a team particle filter over vehicle and transmitter
states, and a trellis + constrained-least-squares cold-start solver for
vehicles joining the session.
"""

__version__ = "0.1.0"
