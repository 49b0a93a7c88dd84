"""Stage functions and the end-to-end pipeline graph."""
