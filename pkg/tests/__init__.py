"""Test suite for the valve-policy toolkit."""
