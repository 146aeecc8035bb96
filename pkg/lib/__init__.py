"""This lib folder contains the library code necessary for running mtae-lab."""
