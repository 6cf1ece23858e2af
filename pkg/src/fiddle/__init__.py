"""Fiddle: a layered distributed debugging engine over a simulated
message-passing runtime, plus Deipa, a script-driven execution controller.
"""

__version__ = "0.1.0"
