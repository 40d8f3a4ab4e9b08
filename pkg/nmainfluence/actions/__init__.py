# Importing these registers the built-in influence measures.
from . import influence, inconsistency  # noqa: F401
