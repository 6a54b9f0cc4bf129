"""Token vocabulary shared by the rationale codec, the dataset, and the policy."""

from __future__ import annotations

import hashlib
import json

from .sim import ALL_ACTIONS, KINDS, Action, action_index

SPECIALS = ("<PAD>", "<BOS>", "<EOS>", "<SEP>", "<OBS>", "<SIT>", "<SPA>", "<PLAN>", "<ACT>")
RELATION_WORDS = ("left_of", "right_of", "above", "below", "on", "at")
DIGITS = tuple(str(i) for i in range(10))
VERBS = ("put", "stack", "in", "move", "to", "grasp", "release")


class VocabError(ValueError):
    """A word or id has no place in the vocabulary."""


class Vocabulary:
    """Bijective token<->id map with a contiguous action-token block."""

    def __init__(self, tokens):
        self.tokens = tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens")
        if len(self.tokens) > 64:
            raise VocabError(f"vocabulary of {len(self.tokens)} exceeds the 64-token budget")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        first_action = ALL_ACTIONS[0].token
        if first_action not in self._ids:
            raise VocabError("vocabulary lacks the action block")
        self.action_start = self._ids[first_action]
        self.action_count = len(ALL_ACTIONS)
        for i, a in enumerate(ALL_ACTIONS):
            if self._ids.get(a.token) != self.action_start + i:
                raise VocabError("action token ids must form a contiguous block")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabError(f"word {word!r} is not in the vocabulary") from None

    def word_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabError(f"id {token_id} outside the vocabulary")
        return self.tokens[token_id]

    def encode(self, words) -> list[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.word_of(i) for i in ids]

    def action_id(self, action: Action) -> int:
        return self.action_start + action_index(action)

    def action_of_id(self, token_id: int) -> Action:
        idx = token_id - self.action_start
        if not 0 <= idx < self.action_count:
            raise VocabError(f"id {token_id} is not an action token")
        return ALL_ACTIONS[idx]

    def is_action_id(self, token_id: int) -> bool:
        return self.action_start <= token_id < self.action_start + self.action_count

    @property
    def pad_id(self) -> int:
        return self._ids["<PAD>"]

    @property
    def eos_id(self) -> int:
        return self._ids["<EOS>"]

    @property
    def sep_id(self) -> int:
        return self._ids["<SEP>"]

    @property
    def act_id(self) -> int:
        return self._ids["<ACT>"]

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.tokens)).encode()).hexdigest()

    def to_json(self) -> dict:
        return {"format_version": 1, "tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        if d.get("format_version") != 1:
            raise VocabError(f"unsupported vocab format version {d.get('format_version')!r}")
        return cls(d["tokens"])


def build_vocab() -> Vocabulary:
    tokens = (
        list(SPECIALS)
        + [a.token for a in ALL_ACTIONS]
        + list(KINDS)
        + list(RELATION_WORDS)
        + list(DIGITS)
        + list(VERBS)
    )
    return Vocabulary(tokens)
