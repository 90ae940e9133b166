"""Independent simulator of the documented scheduling policy.

Plain integers and deques only: one unit per step, alternating between
prefill and decode when both kinds of work exist, round-robin over
prefilling requests, decode batches of the first max_batch ready rows
rotated to the back after each step.
"""

from __future__ import annotations

from collections import deque


class PolicySim:
    def __init__(self, chunk_tokens: int, max_batch: int) -> None:
        self.chunk = chunk_tokens
        self.max_batch = max_batch
        self.prefill: deque[list] = deque()  # [rid, tokens_left, max_tokens]
        self.decode: deque[list] = deque()  # [rid, tokens_to_generate]
        self.last_unit: str | None = None
        self.records: list[tuple] = []

    def submit(self, rid: str, prefill_tokens: int, max_tokens: int) -> None:
        if prefill_tokens > 0:
            self.prefill.append([rid, prefill_tokens, max_tokens])
        else:
            self.decode.append([rid, max_tokens])

    def has_work(self) -> bool:
        return bool(self.prefill or self.decode)

    def step(self) -> tuple | None:
        if not self.has_work():
            return None
        if self.prefill and self.decode:
            unit = "decode" if self.last_unit == "prefill" else "prefill"
        else:
            unit = "prefill" if self.prefill else "decode"
        if unit == "prefill":
            entry = self.prefill.popleft()
            take = min(self.chunk, entry[1])
            entry[1] -= take
            record = ("prefill", entry[0], take)
            if entry[1] > 0:
                self.prefill.append(entry)
            else:
                self.decode.append([entry[0], entry[2]])
        else:
            count = min(self.max_batch, len(self.decode))
            rows = [self.decode.popleft() for _ in range(count)]
            record = ("decode", tuple(r[0] for r in rows))
            for row in rows:
                row[1] -= 1
                if row[1] > 0:
                    self.decode.append(row)
        self.last_unit = unit
        self.records.append(record)
        return record

    def run(self) -> list[tuple]:
        while self.has_work():
            self.step()
        return self.records
