"""Errors raised by the export tool."""


class ExportError(Exception):
    """A problem the user can act on: bad input, bad model, bad output."""

    exit_code = 2


class UsageError(ExportError):
    """Command line misuse."""

    exit_code = 1
