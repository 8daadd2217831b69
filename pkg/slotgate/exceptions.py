
# ———————————————————————————————————————————————————————————————— Base classes


class SlotgateException(Exception):
    pass


class SlotgateError(SlotgateException):
    exit_code = 1


# ————————————————————————————————————————————————————————— Config exceptions


class ConfigError(SlotgateError):
    exit_code = 2

    def __init__(self, field, *args, **kwargs):
        self.field = field

        super().__init__(*args, **kwargs)

    def __str__(self):
        message = super().__str__()

        return '{0}: {1}'.format(self.field, message) if message else self.field


class UsageError(ConfigError):
    pass


# —————————————————————————————————————————————————————— Numerics exceptions


class ShapeError(SlotgateError, ValueError):
    pass


class NumericalError(SlotgateError):
    exit_code = 3


class NonFiniteError(NumericalError):

    def __init__(self, *args, dump_path=None, **kwargs):
        self.dump_path = dump_path

        super().__init__(*args, **kwargs)


# ——————————————————————————————————————————————————————————— Store exceptions


class StoreError(SlotgateError):
    exit_code = 4


class TensorFileError(StoreError):
    pass


class ManifestError(StoreError):

    def __init__(self, field, *args, **kwargs):
        self.field = field

        super().__init__(*args, **kwargs)

    def __str__(self):
        return '{0}: {1}'.format(self.field, super().__str__())


class ChecksumMismatchError(StoreError):

    def __init__(self, path, *args, **kwargs):
        self.path = path

        super().__init__(*args, **kwargs)


class MissingFileError(StoreError):

    def __init__(self, path, *args, **kwargs):
        self.path = path

        super().__init__(*args, **kwargs)


# —————————————————————————————————————————————————— Data & report exceptions


class GenerationError(SlotgateError):
    exit_code = 2


class DiagnosticsError(SlotgateError):
    pass


class VocabularyError(SlotgateError, KeyError):

    def __init__(self, token, *args, **kwargs):
        self.token = token

        super().__init__(token, *args, **kwargs)

    def __str__(self):
        return 'token {0!r} is not in the vocabulary.'.format(self.token)
