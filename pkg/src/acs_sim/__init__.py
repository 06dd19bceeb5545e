"""Simulator for authenticated call stacks built on pointer authentication."""
from .pac import (DEFAULT_LAYOUT, PacKey, PointerLayout, aut, is_canonical, mac_token,
                  mix64, pac_add, set_corrupt, token_of, xpac)
from .program import CallGraphProgram, CallSite, FunctionDef
from .machine import AdversaryView, Machine, Scheme, new_machine

__all__ = ["DEFAULT_LAYOUT", "PacKey", "PointerLayout", "aut", "is_canonical", "mac_token",
           "mix64", "pac_add", "set_corrupt", "token_of", "xpac", "CallGraphProgram",
           "CallSite", "FunctionDef", "AdversaryView", "Machine", "Scheme", "new_machine"]
__version__ = "0.1.0"
