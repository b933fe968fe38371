"""Exception hierarchy shared by every tbhsu module."""


class TbhsuError(Exception):
    """Base class for domain failures (CLI exit code 1)."""


class ParseError(TbhsuError):
    """Malformed input file (CLI exit code 2)."""


class MissingGeometry(TbhsuError):
    pass


class EmptyPointSet(TbhsuError, ValueError):
    pass


class EmptyScene(TbhsuError, ValueError):
    pass


class EmptyRegion(TbhsuError, ValueError):
    pass


class LengthMismatch(TbhsuError, ValueError):
    pass


class EmptyCorpus(TbhsuError, ValueError):
    pass


class TooManyObjects(TbhsuError, ValueError):
    pass


class UnknownLabel(TbhsuError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownClass(TbhsuError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidConfig(TbhsuError, ValueError):
    pass


class ShapeMismatch(TbhsuError, ValueError):
    pass


class NonFiniteValue(TbhsuError, ValueError):
    pass


class TargetOutOfRange(TbhsuError, IndexError):
    pass


class IndexOutOfVocab(TbhsuError, IndexError):
    pass


class DimensionMismatch(TbhsuError, ValueError):
    pass


class MissingLabel(TbhsuError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NoValidTargets(TbhsuError, ValueError):
    pass


class VocabMismatch(TbhsuError, ValueError):
    pass


class IndexOutOfRange(TbhsuError, IndexError):
    pass


class EmptyMatrix(TbhsuError, ValueError):
    pass
