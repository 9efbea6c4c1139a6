from dpopt.backends.base import (AuthError, Backend, BackendError, BackendUnavailableError,
                                 ContextLengthError, GenRequest, LabelScore,
                                 MalformedResponseError, RateLimitError, RecordingBackend,
                                 UnsupportedOperationError, best_label)
from dpopt.backends.http import EndpointConfig, HttpBackend
from dpopt.backends.ngram import NgramBackend
from dpopt.backends.table import CallableBackend, TableBackend

__all__ = [
    "AuthError", "Backend", "BackendError", "BackendUnavailableError", "CallableBackend",
    "ContextLengthError", "EndpointConfig", "GenRequest", "HttpBackend", "LabelScore",
    "MalformedResponseError", "NgramBackend", "RateLimitError", "RecordingBackend",
    "TableBackend", "UnsupportedOperationError", "best_label",
]
