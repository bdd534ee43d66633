"""File formats, run configuration, round drivers and the command line."""
