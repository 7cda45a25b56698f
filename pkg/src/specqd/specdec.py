"""Draft/verify speculative decoding, recursively composable into a
multi-level hierarchy.

Level 0 is the target; level i+1 drafts for level i. Each level keeps its
own KV cache. Verification is greedy: the longest proposed prefix matching
the verifier's own argmax is accepted and the verifier's argmax at the first
mismatch (or after a fully accepted prefix) is emitted as the bonus token.
Because every model breaks argmax ties to the lowest token id, the emitted
stream is token-identical to plain greedy decoding of the target.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .tinylm import (
    ContextOverflow,
    KvCache,
    TinyLmModel,
    forward,
    greedy_next,
    rollback,
    softmax_probs,
)

DEFAULT_SPEC_LEN = 8
DEFAULT_THRESHOLD = 0.4
STRINGENT_THRESHOLD = 0.65


@dataclass
class LevelSpec:
    model: TinyLmModel
    spec_len: int = DEFAULT_SPEC_LEN
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.spec_len < 1:
            raise ValueError("speculation length must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("confidence threshold must be in [0, 1]")


@dataclass
class SpecTree:
    """Ordered levels: [target, draft1, draft2, ...]. Empty draft list is greedy."""

    levels: list[LevelSpec]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("SpecTree needs at least the target level")
        vocab = self.levels[0].model.config.vocab_size
        for lv in self.levels[1:]:
            if lv.model.config.vocab_size != vocab:
                raise ValueError("all levels must share one token-id space")

    @property
    def target(self) -> TinyLmModel:
        return self.levels[0].model

    @property
    def depth(self) -> int:
        return len(self.levels) - 1


@dataclass
class RoundRecord:
    level: int
    proposed: int
    accepted: int
    bonus: bool
    draft_s: float
    verify_s: float


@dataclass
class AcceptanceStats:
    proposed: dict[int, int] = field(default_factory=dict)
    accepted: dict[int, int] = field(default_factory=dict)
    rounds: dict[int, int] = field(default_factory=dict)
    model_time_s: dict[int, float] = field(default_factory=dict)

    def record(self, level: int, proposed: int, accepted: int):
        self.proposed[level] = self.proposed.get(level, 0) + proposed
        self.accepted[level] = self.accepted.get(level, 0) + accepted
        self.rounds[level] = self.rounds.get(level, 0) + 1

    def add_time(self, level: int, seconds: float):
        self.model_time_s[level] = self.model_time_s.get(level, 0.0) + seconds

    def alpha(self, level: int) -> float:
        prop = self.proposed.get(level, 0)
        return self.accepted.get(level, 0) / prop if prop else float("nan")

    def levels(self) -> list[int]:
        return sorted(self.proposed)


@dataclass
class GenerationResult:
    tokens: list[int]
    seconds: float
    rounds: list[RoundRecord] = field(default_factory=list)
    stats: AcceptanceStats = field(default_factory=AcceptanceStats)
    truncated: bool = False


class _Session:
    """One level's model plus its cache and the token history the cache covers.

    Invariant between calls: cache length == len(history), and the next
    forward feeds tokens starting right after ``history``.
    """

    def __init__(self, spec: LevelSpec, level: int, child: "_Session | None"):
        self.spec = spec
        self.level = level
        self.child = child
        self.cache = KvCache.empty(spec.model.config)
        self.history: list[int] = []

    def _sync(self, prefix: list[int]):
        """Make the cache cover exactly ``prefix`` (rolling back on divergence)."""
        common = 0
        limit = min(len(self.history), len(prefix))
        while common < limit and self.history[common] == prefix[common]:
            common += 1
        if common < len(self.history):
            rollback(self.cache, common)
            self.history = self.history[:common]
        if common < len(prefix):
            forward(self.spec.model, self.cache, prefix[common:])
            self.history = list(prefix)

    def _timed_forward(self, tokens, stats: AcceptanceStats):
        t0 = time.perf_counter()
        logits = forward(self.spec.model, self.cache, tokens)
        stats.add_time(self.level, time.perf_counter() - t0)
        self.history += list(tokens)
        return logits

    def propose(self, context: list[int], n_max: int, stats: AcceptanceStats,
                rounds: list[RoundRecord]) -> list[int]:
        """Up to ``n_max`` tokens continuing ``context``, from this level's model.

        Greedy with confidence-threshold early stop at a leaf; the level's own
        draft/verify loop over its child otherwise. Either way the proposal is
        a prefix of this model's greedy continuation of ``context``.
        """
        self._sync(context[:-1])
        if self.child is None:
            return self._propose_greedy(context, n_max, stats)
        return self._propose_speculative(context, n_max, stats, rounds)

    def _propose_greedy(self, context, n_max, stats):
        out: list[int] = []
        pending = [context[-1]]
        for _ in range(n_max):
            try:
                logits = self._timed_forward(pending, stats)
            except ContextOverflow:
                break
            row = logits[-1]
            token = greedy_next(row)
            out.append(token)
            pending = [token]
            if softmax_probs(row)[token] < self.spec.threshold:
                break
        return out

    def _propose_speculative(self, context, n_max, stats, rounds):
        out: list[int] = []
        while len(out) < n_max:
            ctx = context + out
            proposed = self.child.propose(
                ctx, self.child.spec.spec_len, stats, rounds
            )
            new, stop = self._verify_round(ctx, proposed, stats, rounds)
            out += new
            if stop or not new:
                break
        if len(out) > n_max:
            out = out[:n_max]
        return out

    def _verify_round(self, context, proposed, stats, rounds):
        """Verify child proposals with this level's model.

        Returns (tokens to emit at this level, early-stop flag). The flag is
        set when a token's confidence falls below this level's threshold or
        the child proposed nothing (then one greedy token is still emitted).
        """
        t0 = time.perf_counter()
        feed = [context[-1]] + proposed
        try:
            logits = self._timed_forward(feed, stats)
        except ContextOverflow:
            return [], True
        accepted = 0
        for j, tok in enumerate(proposed):
            if greedy_next(logits[j]) != tok:
                break
            accepted += 1
        bonus_row = logits[accepted]
        bonus = greedy_next(bonus_row)
        # Drop cache entries of rejected proposals; bonus stays unprocessed.
        keep = len(context) - 1 + 1 + accepted
        rollback(self.cache, keep)
        self.history = self.history[:keep]
        verify_s = time.perf_counter() - t0
        if proposed:
            stats.record(self.level + 1, len(proposed), accepted)
            rounds.append(RoundRecord(
                level=self.level + 1, proposed=len(proposed), accepted=accepted,
                bonus=True, draft_s=0.0, verify_s=verify_s,
            ))
        emitted = proposed[:accepted] + [bonus]
        # Confidence stop applies to this level's own output stream.
        stop = False
        for j, tok in enumerate(emitted):
            if softmax_probs(logits[j])[tok] < self.spec.threshold:
                emitted = emitted[: j + 1]
                stop = True
                break
        return emitted, stop


def build_sessions(tree: SpecTree) -> _Session:
    child = None
    for level in range(tree.depth, -1, -1):
        child = _Session(tree.levels[level], level, child)
    return child


def greedy_generate(model: TinyLmModel, prompt, max_new: int,
                    eos: int | None = None) -> GenerationResult:
    """Plain auto-regressive argmax decoding; the losslessness reference."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    t0 = time.perf_counter()
    cache = KvCache.empty(model.config)
    out: list[int] = []
    pending = prompt
    truncated = False
    for _ in range(max_new):
        try:
            logits = forward(model, cache, pending)
        except ContextOverflow:
            truncated = True
            break
        token = greedy_next(logits[-1])
        out.append(token)
        if eos is not None and token == eos:
            break
        pending = [token]
    return GenerationResult(out, time.perf_counter() - t0, truncated=truncated)


def speculative_generate(tree: SpecTree, prompt, max_new: int,
                         eos: int | None = None) -> GenerationResult:
    """Draft/verify loop at the top level; lossless vs greedy_generate.

    A depth-0 tree degenerates to greedy decoding of the target.
    """
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    t0 = time.perf_counter()
    stats = AcceptanceStats()
    rounds: list[RoundRecord] = []
    target = build_sessions(tree)

    if target.child is None:
        res = greedy_generate(tree.target, prompt, max_new, eos=eos)
        res.stats = stats
        return res

    out: list[int] = []
    truncated = False
    while len(out) < max_new:
        ctx = prompt + out
        t_draft = time.perf_counter()
        proposed = target.child.propose(
            ctx, target.child.spec.spec_len, stats, rounds
        )
        draft_s = time.perf_counter() - t_draft

        t_verify = time.perf_counter()
        target._sync(ctx[:-1])
        feed = [ctx[-1]] + proposed
        try:
            logits = target._timed_forward(feed, stats)
        except ContextOverflow:
            truncated = True
            break
        accepted = 0
        for j, tok in enumerate(proposed):
            if greedy_next(logits[j]) != tok:
                break
            accepted += 1
        bonus = greedy_next(logits[accepted])
        keep = len(ctx) - 1 + 1 + accepted
        rollback(target.cache, keep)
        target.history = target.history[:keep]
        verify_s = time.perf_counter() - t_verify

        if proposed:
            stats.record(1, len(proposed), accepted)
        rounds.append(RoundRecord(
            level=0, proposed=len(proposed), accepted=accepted,
            bonus=True, draft_s=draft_s, verify_s=verify_s,
        ))

        emitted = proposed[:accepted] + [bonus]
        if eos is not None and eos in emitted:
            emitted = emitted[: emitted.index(eos) + 1]
            out += emitted
            break
        out += emitted
    if len(out) > max_new:
        out = out[:max_new]
    return GenerationResult(out, time.perf_counter() - t0,
                            rounds=rounds, stats=stats, truncated=truncated)


def geomean(values) -> float:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0 or np.any(v <= 0):
        raise ValueError("geomean requires a non-empty positive sequence")
    return float(np.exp(np.mean(np.log(v))))


@dataclass
class BenchmarkReport:
    per_prompt_speedups: list[float]
    geomean_speedup: float
    alpha_rows: list[tuple[int, int, float]]  # (prompt index, level, alpha)
    per_level_alpha: dict[int, float]
    total_tokens: int
    greedy_seconds: float
    spec_seconds: float

    def summary_dict(self) -> dict:
        return {
            "geomean_speedup": self.geomean_speedup,
            "per_level_alpha": {str(k): v for k, v in self.per_level_alpha.items()},
            "total_tokens": self.total_tokens,
            "greedy_seconds": self.greedy_seconds,
            "spec_seconds": self.spec_seconds,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary_dict(), indent=2)


def run_benchmark(tree: SpecTree, prompts, max_new: int,
                  eos: int | None = None) -> BenchmarkReport:
    """Greedy baseline vs speculative pipeline, per prompt; geomean speedup."""
    prompts = [list(p) for p in prompts]
    if not prompts:
        raise ValueError("prompt set must be non-empty")
    speedups = []
    alpha_rows = []
    agg = AcceptanceStats()
    total_tokens = 0
    greedy_total = spec_total = 0.0
    for pi, prompt in enumerate(prompts):
        base = greedy_generate(tree.target, prompt, max_new, eos=eos)
        spec = speculative_generate(tree, prompt, max_new, eos=eos)
        if spec.tokens != base.tokens:
            raise AssertionError(f"losslessness violated on prompt {pi}")
        speedups.append(base.seconds / spec.seconds)
        greedy_total += base.seconds
        spec_total += spec.seconds
        total_tokens += len(spec.tokens)
        for level in spec.stats.levels():
            alpha_rows.append((pi, level, spec.stats.alpha(level)))
            agg.proposed[level] = agg.proposed.get(level, 0) + spec.stats.proposed[level]
            agg.accepted[level] = agg.accepted.get(level, 0) + spec.stats.accepted[level]
    per_level = {lv: agg.alpha(lv) for lv in agg.levels()}
    return BenchmarkReport(
        per_prompt_speedups=speedups,
        geomean_speedup=geomean(speedups) if tree.depth else 1.0,
        alpha_rows=alpha_rows,
        per_level_alpha=per_level,
        total_tokens=total_tokens,
        greedy_seconds=greedy_total,
        spec_seconds=spec_total,
    )


ROUNDS_CSV_HEADER = "level,proposed,accepted,draft_ms,verify_ms"
ACCEPTANCE_CSV_HEADER = "prompt,level,alpha"


def rounds_csv(rounds: list[RoundRecord]) -> str:
    lines = [ROUNDS_CSV_HEADER]
    for r in rounds:
        lines.append(
            f"{r.level},{r.proposed},{r.accepted},"
            f"{r.draft_s * 1e3:.6f},{r.verify_s * 1e3:.6f}"
        )
    return "\n".join(lines) + "\n"


def acceptance_csv(rows) -> str:
    lines = [ACCEPTANCE_CSV_HEADER]
    for prompt, level, alpha in rows:
        lines.append(f"{prompt},{level},{alpha:.6f}")
    return "\n".join(lines) + "\n"
