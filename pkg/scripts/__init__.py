"""Developer scripts for steering runs: CLI wrapper, reproduction, acceptance gate, HTML report."""
