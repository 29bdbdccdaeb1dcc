"""Hand-built scorable models shared across the test suite.

These implement the same protocol as LmModel (logits_batch plus
vocab_size / eot_id / max_seq_len) with fully controlled behavior.
"""

import numpy as np

from unlearnkit.lm import EOT_ID, VOCAB_SIZE


class UniformModel:
    """Assigns equal probability to every token at every step."""

    def __init__(self, vocab_size=VOCAB_SIZE, max_seq_len=512):
        self.vocab_size = vocab_size
        self.eot_id = EOT_ID
        self.max_seq_len = max_seq_len

    def logits_batch(self, ids):
        b, t = np.asarray(ids).shape
        return np.zeros((b, t, self.vocab_size), dtype=np.float32)


class SequenceMemorizer:
    """Positional lookup table: at position t it puts full mass on seq[t+1]
    (and on EOT past the end), regardless of what tokens it actually saw."""

    def __init__(self, seq, vocab_size=VOCAB_SIZE, max_seq_len=512, logit_scale=8.0):
        self.seq = list(seq)
        self.vocab_size = vocab_size
        self.eot_id = EOT_ID
        self.max_seq_len = max_seq_len
        self.logit_scale = logit_scale

    def logits_batch(self, ids):
        b, t = np.asarray(ids).shape
        out = np.zeros((b, t, self.vocab_size), dtype=np.float32)
        for pos in range(t):
            nxt = self.seq[pos + 1] if pos + 1 < len(self.seq) else self.eot_id
            out[:, pos, nxt] = self.logit_scale
        return out


class FixedLogitsModel:
    """Replays a fixed [T, V] logit table positionally (last row repeats)."""

    def __init__(self, table, max_seq_len=512):
        self.table = np.asarray(table, dtype=np.float32)
        self.vocab_size = self.table.shape[1]
        self.eot_id = EOT_ID
        self.max_seq_len = max_seq_len

    def logits_batch(self, ids):
        b, t = np.asarray(ids).shape
        idx = np.minimum(np.arange(t), self.table.shape[0] - 1)
        row = self.table[idx]
        return np.broadcast_to(row, (b, t, self.vocab_size)).astype(np.float32)


class PromptAnswerModel:
    """Answers known prompts with fixed strings, for judge/QA metric tests.

    Given {prompt_text: output_text}, any row whose ids start with an
    encoded prompt continues byte-by-byte with that prompt's output, then
    EOT. Unknown prompts get EOT immediately.
    """

    def __init__(self, answers: dict, vocab_size=VOCAB_SIZE, max_seq_len=512):
        from unlearnkit.lm import encode

        self.routes = {tuple(encode(p)): list(o.encode("utf-8")) for p, o in answers.items()}
        self.vocab_size = vocab_size
        self.eot_id = EOT_ID
        self.max_seq_len = max_seq_len

    def _next_token(self, row_ids):
        row = list(row_ids)
        for prompt, out_bytes in self.routes.items():
            lp = len(prompt)
            if len(row) >= lp and tuple(row[:lp]) == prompt:
                pos = len(row) - lp
                return out_bytes[pos] if pos < len(out_bytes) else self.eot_id
        return self.eot_id

    def logits_batch(self, ids):
        ids = np.asarray(ids)
        b, t = ids.shape
        out = np.zeros((b, t, self.vocab_size), dtype=np.float32)
        for j in range(b):
            for pos in range(t):
                out[j, pos, self._next_token(ids[j, : pos + 1])] = 8.0
        return out
