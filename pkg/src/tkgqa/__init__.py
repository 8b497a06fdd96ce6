"""Question answering over temporal knowledge graphs with a pluggable reasoner."""

from .config import Config, load_config
from .controller import Engine, QAResult
from .store import Fact, TemporalPath, Timestamp, Tkg, load_tsv, parse_timestamp

__all__ = ["Config", "Engine", "Fact", "QAResult", "TemporalPath", "Timestamp", "Tkg", "load_config",
           "load_tsv", "parse_timestamp"]
