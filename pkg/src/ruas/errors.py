"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
DataIOError -> 3, NumericError -> 4.
"""


class RuasError(Exception):
    pass


class ShapeError(RuasError):
    pass


class ConfigError(RuasError):
    pass


class DomainError(RuasError):
    pass


class ContractError(RuasError):
    pass


class NumericError(RuasError):
    pass


class DataIOError(RuasError):
    pass
