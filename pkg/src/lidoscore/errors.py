"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class LidoError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(LidoError):
    exit_code = 1
    kind = "config"


class DataError(LidoError):
    exit_code = 2
    kind = "data"


class SchemaError(DataError):
    kind = "schema"


class CrosswalkError(DataError):
    kind = "crosswalk"


class NumericalError(LidoError):
    exit_code = 3
    kind = "numerical"
