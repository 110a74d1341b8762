"""Stimuli, configuration, oracles, artifact IO, runner and CLI."""
