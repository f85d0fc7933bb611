"""Exception types raised across the package."""


class AbundfitError(Exception):
    """Base class for all package errors."""


class DataError(AbundfitError):
    """Malformed or inconsistent input data.

    Parameters
    ----------
    message : str
        Human-readable description.
    path : str, optional
        File the problem was found in.
    row : int, optional
        1-based data row number (header excluded).
    """

    def __init__(self, message, path=None, row=None):
        self.path = None if path is None else str(path)
        self.row = row
        where = []
        if self.path is not None:
            where.append(self.path)
        if row is not None:
            where.append(f"row {row}")
        text = f"{message} ({', '.join(where)})" if where else message
        super().__init__(text)
        self.message = message

    def to_dict(self):
        return {"kind": "data", "message": self.message, "path": self.path, "row": self.row}


class ConfigError(AbundfitError):
    """Invalid run configuration or model specification."""

    def to_dict(self):
        return {"kind": "config", "message": str(self)}


class NumericalError(AbundfitError):
    """Numerical failure (non-positive-definite matrix, non-finite posterior)."""

    def __init__(self, message, site=None):
        self.site = site
        super().__init__(message if site is None else f"{message} (site {site})")

    def to_dict(self):
        return {"kind": "numerical", "message": str(self), "site": self.site}
