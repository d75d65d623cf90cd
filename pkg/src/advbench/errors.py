"""Error taxonomy shared across the package.

ConfigError marks a problem the user can fix in a config file or flag;
IntegrityError marks damaged or mistyped bytes on disk. The CLI maps the
former to exit code 1 and the latter (with OSError) to exit code 2.
"""


class ConfigError(Exception):
    pass


class IntegrityError(Exception):
    pass
