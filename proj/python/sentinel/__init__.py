"""Python bindings for the sentinel syscall n-gram classifier."""

from ._sentinel import (
    CorruptionError,
    InvalidArgument,
    IoError,
    Model,
    ParseError,
    SentinelError,
    SyscallEvent,
    Trace,
    TraceMeta,
    VersionError,
    Vocabulary,
    VocabularyMismatch,
    __version__,
    consensus_class,
    default_syscalls,
    extract_ngrams,
    generate_trace,
    label_slices,
    metrics,
    predict_windows,
    read_trace,
    write_trace,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
