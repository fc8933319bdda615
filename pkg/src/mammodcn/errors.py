class RejectedInput(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class BadConfig(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class BadMagic(ModelFileError):
    pass


class UnsupportedVersion(ModelFileError):
    pass


class TruncatedFile(ModelFileError):
    def __init__(self, offset: int, needed: int, available: int):
        super().__init__(
            f"truncated at offset {offset}: needed {needed} bytes, "
            f"{available} available"
        )
        self.offset = offset
