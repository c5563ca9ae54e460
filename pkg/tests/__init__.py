"""Test suite for the Corona Stereo Pipeline."""
