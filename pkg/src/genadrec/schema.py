"""Unified token sequences and the prefix-bidirectional attention kernel.

A user journey is one time-ordered sequence mixing four token kinds:

* U: profile attributes (age bucket, gender, activity tier),
* O: organic content the user engaged with (as a code path),
* E: request environment (placement, hour of day, privacy flag),
* I: an ad interaction (code path, action type, observed eCPM, and the
  ranking model's pCTR/pCVR at the time).

U/O/E tokens jointly form the prompt region: inside it attention is
bidirectional, everywhere else it is causal. The mask builder and the
modulated attention forward pass implement exactly that rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .quantizer import CodePath

KIND_USER = "U"
KIND_ORGANIC = "O"
KIND_ENV = "E"
KIND_ITEM = "I"
KINDS = (KIND_USER, KIND_ORGANIC, KIND_ENV, KIND_ITEM)
PROMPT_KINDS = frozenset({KIND_USER, KIND_ORGANIC, KIND_ENV})

ACTION_IMPRESSION = "impression"
ACTION_CLICK = "click"
ACTION_CONVERSION = "conversion"
ACTIONS = (ACTION_IMPRESSION, ACTION_CLICK, ACTION_CONVERSION)


@dataclass(frozen=True)
class Token:
    kind: str
    attrs: tuple = ()                  # U: (age_bucket, gender, activity_tier)
    path: CodePath | None = None       # O and I
    context: tuple = ()                # E: (placement_id, hour, privacy_flag)
    item_id: str | None = None         # I
    action: str | None = None          # I
    ecpm: float = 0.0                  # I
    pctr: float = 1.0                  # I
    pcvr: float = 1.0                  # I

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown token kind {self.kind!r}")
        if self.kind == KIND_ITEM:
            if self.action not in ACTIONS:
                raise InvalidInputError(f"unknown action type {self.action!r}")
            if not (self.ecpm >= 0 and math.isfinite(self.ecpm)):
                raise InvalidInputError("I-token eCPM must be finite and >= 0")
            for name, p in (("pCTR", self.pctr), ("pCVR", self.pcvr)):
                if not (0 < p <= 1):
                    raise InvalidInputError(f"I-token {name} must lie in (0, 1]")
        if self.kind in (KIND_ITEM, KIND_ORGANIC) and self.path is None:
            raise InvalidInputError(f"{self.kind}-token requires a code path")


@dataclass(frozen=True)
class UserJourney:
    user_id: str
    tokens: tuple[Token, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise InvalidInputError("journey must contain at least one token")
        if len(self.tokens) != len(self.timestamps):
            raise InvalidInputError("tokens and timestamps disagree in length")
        # Profile tokens are pinned to the front; strict chronology is
        # enforced over the event suffix.
        suffix = [
            ts for tok, ts in zip(self.tokens, self.timestamps) if tok.kind != KIND_USER
        ]
        if any(b < a for a, b in zip(suffix, suffix[1:])):
            raise InvalidInputError("journey events must be time-ordered")

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(tok.kind for tok in self.tokens)


def token_from_event(event: dict) -> Token:
    """Map one raw event record (JSON-lines row) to a Token."""
    kind = event.get("kind")
    if kind == KIND_USER:
        return Token(
            kind=KIND_USER,
            attrs=(
                int(event["age_bucket"]),
                str(event["gender"]),
                str(event["activity_tier"]),
            ),
        )
    if kind == KIND_ORGANIC:
        return Token(kind=KIND_ORGANIC, path=tuple(int(c) for c in event["path"]))
    if kind == KIND_ENV:
        return Token(
            kind=KIND_ENV,
            context=(
                str(event["placement_id"]),
                int(event["hour"]),
                bool(event.get("privacy", False)),
            ),
        )
    if kind == KIND_ITEM:
        return Token(
            kind=KIND_ITEM,
            path=tuple(int(c) for c in event["path"]),
            item_id=str(event.get("item_id", "")),
            action=event["action"],
            ecpm=float(event["ecpm"]),
            pctr=float(event["pctr"]),
            pcvr=float(event["pcvr"]),
        )
    raise InvalidInputError(f"unknown event kind {kind!r}")


def build_sequence(events: list[dict]) -> UserJourney:
    """Assemble a journey from raw events.

    Events are sorted stably by timestamp, mapped to tokens, and profile
    (U) tokens are moved to the front, keeping their relative order.
    """
    if not events:
        raise InvalidInputError("no events to assemble")
    for ev in events:
        if "ts" not in ev:
            raise InvalidInputError("event missing timestamp")
    ordered = sorted(events, key=lambda ev: ev["ts"])
    profile = [ev for ev in ordered if ev.get("kind") == KIND_USER]
    rest = [ev for ev in ordered if ev.get("kind") != KIND_USER]
    arranged = profile + rest
    tokens = tuple(token_from_event(ev) for ev in arranged)
    user_ids = {str(ev["user_id"]) for ev in arranged if "user_id" in ev}
    if len(user_ids) > 1:
        raise InvalidInputError(f"events mix user ids: {sorted(user_ids)}")
    user_id = user_ids.pop() if user_ids else ""
    return UserJourney(
        user_id=user_id,
        tokens=tokens,
        timestamps=tuple(int(ev["ts"]) for ev in arranged),
    )


def build_attention_mask(kinds: list[str] | tuple[str, ...]) -> np.ndarray:
    """Additive T x T mask: 0 where j may attend, -inf elsewhere.

    Entry (i, j) is 0 when j <= i (causal visibility) or when both kinds
    are prompt kinds (U/O/E attend to each other bidirectionally, decided
    per token kind, not by contiguity).
    """
    if len(kinds) == 0:
        raise InvalidInputError("mask requires at least one token")
    for k in kinds:
        if k not in KINDS:
            raise InvalidInputError(f"unknown token kind {k!r}")
    t = len(kinds)
    prompt = np.array([k in PROMPT_KINDS for k in kinds])
    causal = np.tril(np.ones((t, t), dtype=bool))
    visible = causal | (prompt[:, None] & prompt[None, :])
    mask = np.where(visible, 0.0, -np.inf)
    return mask


def attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    gate: np.ndarray,
    mask: np.ndarray,
) -> np.ndarray:
    """Softmax(q kT / sqrt(d) + mask) v, elementwise-scaled by `gate`.

    The gate multiplies the attended output per position and channel,
    letting the caller attenuate uninformative interactions.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    gate = np.asarray(gate, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape or q.shape != gate.shape:
        raise InvalidInputError("q, k, v, gate must share one (T, d) shape")
    t, d = q.shape
    if d < 1:
        raise InvalidInputError("feature dimension must be >= 1")
    if mask.shape != (t, t):
        raise InvalidInputError("mask shape must be (T, T)")

    scores = q @ k.T / math.sqrt(d) + mask
    row_max = scores.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise InvalidInputError("a row of the mask hides every position")
    weights = np.exp(scores - row_max)
    weights /= weights.sum(axis=1, keepdims=True)
    return (weights @ v) * gate


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-stochastic attention matrix (exposed for tests and inspection)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    scores = q @ k.T / math.sqrt(q.shape[1]) + mask
    row_max = scores.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise InvalidInputError("a row of the mask hides every position")
    w = np.exp(scores - row_max)
    return w / w.sum(axis=1, keepdims=True)
