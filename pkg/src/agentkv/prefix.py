"""Character-level prompt-vs-transcript matching and the block reuse plan.

Prompts are compared against the cached transcript as raw text (code
points, not token ids), which survives context-dependent tokenization.
The verdict is EXACT (identical), EXTEND (the prompt strictly extends the
transcript, or at least half of it is still a valid prefix), or DIVERGE.
Partial reuse is truncated down to whole-block boundaries so a reused
block can never contain diverged tokens.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .blocks import AgentCache

__all__ = ["MatchResult", "Verdict", "common_prefix_chars", "match"]

_CHUNK = 256


class Verdict(enum.Enum):
    EXACT = "exact"
    EXTEND = "extend"
    DIVERGE = "diverge"


@dataclass(frozen=True)
class MatchResult:
    verdict: Verdict
    common_chars: int
    reuse_tokens: int
    reuse_blocks: int
    suffix_text: str

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "common_chars": self.common_chars,
            "reuse_tokens": self.reuse_tokens,
            "reuse_blocks": self.reuse_blocks,
            "suffix_text": self.suffix_text,
        }


def common_prefix_chars(a: str, b: str) -> int:
    """Length of the longest common prefix, counted in code points.

    Compares fixed-size slices first and falls back to a scalar scan only
    inside the first differing slice.
    """
    limit = min(len(a), len(b))
    pos = 0
    while pos < limit:
        end = min(pos + _CHUNK, limit)
        if a[pos:end] == b[pos:end]:
            pos = end
            continue
        for i in range(pos, end):
            if a[i] != b[i]:
                return i
        return end
    return limit


def match(cached: AgentCache, prompt: str, block_tokens: int) -> MatchResult:
    """Compare a prompt against a cached transcript and plan block reuse."""
    transcript = cached.transcript_text
    token_count = cached.token_count
    c = common_prefix_chars(transcript, prompt)

    if len(transcript) == 0:
        # empty cache: fresh prefill (the common-prefix ratio is taken as 0)
        return MatchResult(Verdict.DIVERGE, c, 0, 0, prompt)

    if c == len(transcript) == len(prompt):
        return MatchResult(
            Verdict.EXACT, c, token_count, token_count // block_tokens, ""
        )

    if c == len(transcript):
        # prompt strictly extends the transcript: the whole cache is valid
        return MatchResult(
            Verdict.EXTEND, c, token_count, token_count // block_tokens, prompt[c:]
        )

    if c / len(transcript) >= 0.5:
        # partial overlap: keep tokens wholly inside the common prefix,
        # then truncate down to a whole-block boundary
        offsets_ext = list(cached.char_offsets) + [len(transcript)]
        whole = 0
        for i in range(token_count):
            if offsets_ext[i + 1] <= c:
                whole = i + 1
            else:
                break
        reuse_blocks = whole // block_tokens
        reuse_tokens = reuse_blocks * block_tokens
        return MatchResult(
            Verdict.EXTEND, c, reuse_tokens, reuse_blocks,
            prompt[offsets_ext[reuse_tokens]:],
        )

    return MatchResult(Verdict.DIVERGE, c, 0, 0, prompt)
