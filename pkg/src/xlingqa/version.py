"""Package version constant."""

VERSION = "0.1.0"
