"""Shared error base.

Every failure that can cross a daemon boundary derives from FiddleError and
carries a short machine-readable `code`; daemons put the code in the reply
status field and clients re-raise it as a ServiceError.
"""


class FiddleError(Exception):
    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
