from dataclasses import dataclass
from typing import List, Optional, Sequence

from src.configs import RESERVED_SYMBOLS, TaskConfig
from src.utils.errors import ConfigError, InputError
from src.utils.monitors import HighLevelErrors

BOS, EOS, SEP, QUERY, SYS, USER, TOOL, ASSIST = range(RESERVED_SYMBOLS)
SPECIAL_NAMES = ("<BOS>", "<EOS>", "<SEP>", "<QUERY>", "<SYS>", "<USER>", "<TOOL>", "<ASSIST>")


@dataclass(frozen=True)
class Vocab:
    """
    Fixed symbol table: the eight reserved symbols, then keys k0..k{m-1}, values
    v0..v{n-1} and fillers f0..f{p-1}, in that id order.
    """
    n_keys: int = 16
    n_values: int = 16
    n_fillers: int = 24

    @classmethod
    def from_config(cls, config: TaskConfig, vocab_size: Optional[int] = None) -> "Vocab":
        vocab = cls(config.n_keys, config.n_values, config.n_fillers)
        if vocab_size is not None and vocab.size > vocab_size:
            message = f"Task vocabulary needs {vocab.size} ids but the model has {vocab_size}."
            HighLevelErrors.error(message)
            raise ConfigError(message)
        return vocab

    @property
    def size(self) -> int:
        return RESERVED_SYMBOLS + self.n_keys + self.n_values + self.n_fillers

    @property
    def key_offset(self) -> int:
        return RESERVED_SYMBOLS

    @property
    def value_offset(self) -> int:
        return RESERVED_SYMBOLS + self.n_keys

    @property
    def filler_offset(self) -> int:
        return RESERVED_SYMBOLS + self.n_keys + self.n_values

    def key(self, index: int) -> int:
        return self._checked(self.key_offset + index, index, self.n_keys, "key")

    def value(self, index: int) -> int:
        return self._checked(self.value_offset + index, index, self.n_values, "value")

    def filler(self, index: int) -> int:
        return self._checked(self.filler_offset + index, index, self.n_fillers, "filler")

    @staticmethod
    def _checked(token: int, index: int, pool: int, kind: str) -> int:
        if not 0 <= index < pool:
            message = f"{kind} index {index} outside pool of {pool}."
            HighLevelErrors.error(message)
            raise InputError(message)
        return int(token)

    def is_key(self, token: int) -> bool:
        return self.key_offset <= token < self.value_offset

    def is_value(self, token: int) -> bool:
        return self.value_offset <= token < self.filler_offset

    def is_filler(self, token: int) -> bool:
        return self.filler_offset <= token < self.size

    def key_index(self, token: int) -> int:
        return int(token) - self.key_offset

    def value_index(self, token: int) -> int:
        return int(token) - self.value_offset

    def name(self, token: int) -> str:
        token = int(token)
        if 0 <= token < RESERVED_SYMBOLS:
            return SPECIAL_NAMES[token]
        if self.is_key(token):
            return f"k{self.key_index(token)}"
        if self.is_value(token):
            return f"v{self.value_index(token)}"
        if self.is_filler(token):
            return f"f{token - self.filler_offset}"
        return f"<UNK:{token}>"

    def decode(self, tokens: Sequence[int]) -> List[str]:
        return [self.name(t) for t in tokens]

    def encode(self, names: Sequence[str]) -> List[int]:
        lookup = {name: i for i, name in enumerate(SPECIAL_NAMES)}
        tokens = []
        for name in names:
            if name in lookup:
                tokens.append(lookup[name])
            elif name[:1] in ("k", "v", "f") and name[1:].isdigit():
                index = int(name[1:])
                tokens.append({"k": self.key, "v": self.value, "f": self.filler}[name[0]](index))
            else:
                message = f"Unknown symbol '{name}'."
                HighLevelErrors.error(message)
                raise InputError(message)
        return tokens
