"""
Seeded synthetic long-context tasks.

Every haystack sample is laid out as

    [BOS SYS f f f f] [TOOL ...] x n_context_turns [USER QUERY q] [ASSIST answer... EOS]

where facts are planted as `key SEP value` triples inside the tool turns and every
other tool slot is an i.i.d. filler. The agentic kind interleaves context turns and
assistant turns instead. Positions are 0-based.
"""
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.configs import TaskConfig, TaskKind
from src.diagnostics.regions import RegionMap, RegionTag
from src.masking.attention_mask import Segmentation, TokenRole
from src.taskgen.sample import Sample
from src.taskgen.vocab import ASSIST, BOS, EOS, QUERY, SEP, SYS, TOOL, USER, Vocab
from src.utils.errors import ConfigError
from src.utils.monitors import HighLevelErrors

SYSTEM_TURN_FILLERS = 4
FACT_WIDTH = 3

Pair = Tuple[int, int]

_ROLE_TAGS = {SYS: RegionTag.SYSTEM_USER, BOS: RegionTag.SYSTEM_USER, USER: RegionTag.SYSTEM_USER,
              TOOL: RegionTag.TOOL_RESPONSE, ASSIST: RegionTag.ASSISTANT_RESPONSE}


def _config_error(message: str) -> None:
    HighLevelErrors.error(message)
    raise ConfigError(message)


def _turn_sizes(total: int, n: int) -> List[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


@dataclass
class _Turn:
    tokens: List[int]
    label: TokenRole

    @property
    def tag(self) -> RegionTag:
        return _ROLE_TAGS[self.tokens[0]]


@dataclass
class _Haystack:
    """Mutable haystack layout; tool-turn slots are fillers until a fact is placed."""
    vocab: Vocab
    turns: List[_Turn]
    tool_turns: List[int]
    occupied: Set[int] = field(default_factory=set)

    @classmethod
    def build(cls, T: int, n_tool: int, query: List[int], answer: List[int], vocab: Vocab,
              rng: np.random.Generator) -> "_Haystack":
        assistant = [ASSIST] + list(answer) + [EOS]
        head = 2 + SYSTEM_TURN_FILLERS
        minimum = head + (1 + FACT_WIDTH) * n_tool + len(query) + len(assistant)
        if T < minimum:
            _config_error(f"Sequence length {T} is too small for {n_tool} tool turns; need at least {minimum}.")

        def fillers(count: int) -> List[int]:
            return [vocab.filler(int(i)) for i in rng.integers(0, vocab.n_fillers, size=count)]

        turns = [_Turn([BOS, SYS] + fillers(SYSTEM_TURN_FILLERS), TokenRole.CONTEXT)]
        tool_total = T - head - len(query) - len(assistant)
        for size in _turn_sizes(tool_total, n_tool):
            turns.append(_Turn([TOOL] + fillers(size - 1), TokenRole.CONTEXT))
        turns.append(_Turn(list(query), TokenRole.CONTEXT))
        turns.append(_Turn(assistant, TokenRole.RESPONSE))
        return cls(vocab, turns, list(range(1, 1 + n_tool)))

    def spans(self) -> List[Tuple[int, int]]:
        spans, start = [], 0
        for turn in self.turns:
            spans.append((start, start + len(turn.tokens)))
            start += len(turn.tokens)
        return spans

    def free_starts(self, width: int, turn_index: Optional[int] = None) -> List[int]:
        spans = self.spans()
        indices = self.tool_turns if turn_index is None else [turn_index]
        starts = []
        for index in indices:
            start, stop = spans[index]
            for p in range(start + 1, stop - width + 1):
                if not any(q in self.occupied for q in range(p, p + width)):
                    starts.append(p)
        return starts

    def place(self, position: int, tokens: Sequence[int]) -> List[int]:
        spans = self.spans()
        for index, (start, stop) in enumerate(spans):
            if start <= position < stop:
                offset = position - start
                self.turns[index].tokens[offset:offset + len(tokens)] = list(tokens)
                break
        placed = list(range(position, position + len(tokens)))
        self.occupied.update(placed)
        return placed


def _assemble(turns: Sequence[_Turn], kind: TaskKind, seed: int, answer_span: Sequence[int],
              needle_positions: Sequence[int], fact_pairs: Sequence[Pair], sink_window: int) -> Sample:
    tokens, labels, turn_ids, region_turns = [], [], [], []
    for turn_id, turn in enumerate(turns):
        start = len(tokens)
        tokens += turn.tokens
        labels += [turn.label] * len(turn.tokens)
        turn_ids += [turn_id] * len(turn.tokens)
        region_turns.append((turn.tag, start, len(tokens)))
    length = len(tokens)
    needles = tuple(sorted(int(p) for p in needle_positions))
    return Sample(
        tokens=tuple(int(t) for t in tokens),
        segmentation=Segmentation(tuple(labels), tuple(turn_ids)),
        answer_span=tuple(int(p) for p in answer_span),
        needle_positions=needles,
        task_kind=kind,
        seed=int(seed),
        fact_pairs=tuple((int(k), int(v)) for k, v in fact_pairs),
        needle_depth=needles[0] / (length - 1) if needles else 0.0,
        regions=RegionMap.from_turns(region_turns, length, sink_window),
    ).validate()


def _setup(T: int, config: Optional[TaskConfig], seed: int) -> Tuple[TaskConfig, Vocab, np.random.Generator]:
    config = TaskConfig(seq_len=T) if config is None else config
    return config, Vocab.from_config(config), np.random.default_rng(seed)


def _draw_pair(config: TaskConfig, rng: np.random.Generator) -> Pair:
    return int(rng.integers(config.n_keys)), int(rng.integers(config.n_values))


def _place_in_distinct_turns(hay: _Haystack, facts: Sequence[List[int]], rng: np.random.Generator) -> List[int]:
    if len(facts) > len(hay.tool_turns):
        _config_error(f"{len(facts)} facts need as many tool turns, only {len(hay.tool_turns)} configured.")
    chosen = sorted(int(t) for t in rng.choice(hay.tool_turns, size=len(facts), replace=False))
    placed = []
    for turn_index, fact in zip(chosen, facts):
        starts = hay.free_starts(len(fact), turn_index)
        placed += hay.place(int(rng.choice(starts)), fact)
    return placed


def gen_single_fact(T: int, needle_depth: float, seed: int, config: Optional[TaskConfig] = None,
                    pair: Optional[Pair] = None) -> Sample:
    """
    One `key SEP value` fact planted at relative depth in the tool turns; the user turn
    asks for the key and the assistant answers the value.

    The fact starts at the free tool slot nearest round(needle_depth * (T - 1)).

    Raises:
        ConfigError: If T cannot hold the template or the depth is outside [0, 1].
    """
    if not 0.0 <= needle_depth <= 1.0:
        _config_error(f"needle_depth must lie in [0, 1], got {needle_depth}.")
    config, vocab, rng = _setup(T, config, seed)
    k, v = _draw_pair(config, rng) if pair is None else pair
    hay = _Haystack.build(T, config.n_context_turns, [USER, QUERY, vocab.key(k)], [vocab.value(v)], vocab, rng)
    target = int(round(needle_depth * (T - 1)))
    starts = hay.free_starts(FACT_WIDTH)
    start = min(starts, key=lambda p: (abs(p - target), p))
    needles = hay.place(start, [vocab.key(k), SEP, vocab.value(v)])
    return _assemble(hay.turns, TaskKind.SINGLE_FACT, seed, [T - 2], needles, [(k, v)], config.sink_window)


def gen_two_fact(T: int, seed: int, config: Optional[TaskConfig] = None, pair: Optional[Pair] = None) -> Sample:
    """
    Chained facts `k SEP a` then `a SEP v` (a is a bridging key) in two distinct tool
    turns; the query asks for k and the gold answer is v.
    """
    config, vocab, rng = _setup(T, config, seed)
    k, v = _draw_pair(config, rng) if pair is None else pair
    a = int(rng.choice([i for i in range(config.n_keys) if i != k]))
    hay = _Haystack.build(T, config.n_context_turns, [USER, QUERY, vocab.key(k)], [vocab.value(v)], vocab, rng)
    facts = [[vocab.key(k), SEP, vocab.key(a)], [vocab.key(a), SEP, vocab.value(v)]]
    needles = _place_in_distinct_turns(hay, facts, rng)
    return _assemble(hay.turns, TaskKind.TWO_FACT, seed, [T - 2], needles, [(k, v)], config.sink_window)


def gen_multi_value(T: int, seed: int, config: Optional[TaskConfig] = None,
                    pairs: Optional[Sequence[Pair]] = None) -> Sample:
    """
    One key bound to two different values in two tool turns; the assistant answers
    both values in context order.
    """
    config, vocab, rng = _setup(T, config, seed)
    if pairs is None:
        k = int(rng.integers(config.n_keys))
        v1, v2 = (int(x) for x in rng.choice(config.n_values, size=2, replace=False))
    else:
        (k, v1), (k2, v2) = pairs
        if k != k2 or v1 == v2:
            _config_error(f"multi_value pairs must share a key and differ in value, got {list(pairs)}.")
    answer = [vocab.value(v1), vocab.value(v2)]
    hay = _Haystack.build(T, config.n_context_turns, [USER, QUERY, vocab.key(k)], answer, vocab, rng)
    facts = [[vocab.key(k), SEP, vocab.value(v1)], [vocab.key(k), SEP, vocab.value(v2)]]
    needles = _place_in_distinct_turns(hay, facts, rng)
    return _assemble(hay.turns, TaskKind.MULTI_VALUE, seed, [T - 3, T - 2], needles,
                     [(k, v1), (k, v2)], config.sink_window)


def gen_aggregation(T: int, seed: int, config: Optional[TaskConfig] = None,
                    gold_key: Optional[int] = None) -> Sample:
    """
    Key symbols repeated through the tool turns; the query `QUERY SEP` asks for the
    key that occurs most often, which is unique by construction.
    """
    config, vocab, rng = _setup(T, config, seed)
    gold = int(rng.integers(config.n_keys)) if gold_key is None else int(gold_key)
    hay = _Haystack.build(T, config.n_context_turns, [USER, QUERY, SEP], [vocab.key(gold)], vocab, rng)
    free = hay.free_starts(1)
    gold_count = max(2, min(8, len(free) // 6))
    others = [i for i in range(config.n_keys) if i != gold]
    distractors = [int(d) for d in rng.choice(others, size=min(3, len(others)), replace=False)]
    counts = {gold: gold_count}
    counts.update({d: int(rng.integers(1, gold_count)) for d in distractors})
    symbols = [key for key, count in counts.items() for _ in range(count)]
    if len(symbols) > len(free):
        _config_error(f"Sequence length {T} leaves {len(free)} tool slots, aggregation needs {len(symbols)}.")
    slots = rng.choice(free, size=len(symbols), replace=False)
    needles = []
    for slot, key in zip(slots, symbols):
        hay.place(int(slot), [vocab.key(key)])
        if key == gold:
            needles.append(int(slot))
    return _assemble(hay.turns, TaskKind.AGGREGATION, seed, [T - 2], needles, [(gold, -1)], config.sink_window)


def gen_multiturn_agentic(T: int, n_turns: int, seed: int, config: Optional[TaskConfig] = None,
                          pairs: Optional[Sequence[Pair]] = None) -> Sample:
    """
    n_turns (context, assistant) rounds. Round 0's context is the system/user turn, later
    rounds open with TOOL. Each context turn plants one fact and ends with `QUERY k_s`
    for some s <= t, so every fact a response needs precedes it; each assistant turn is
    `ASSIST v_s EOS`. The gold answer is the value of the last round.

    Raises:
        ConfigError: If n_turns < 2, there are fewer keys than rounds, or T is too small.
    """
    if n_turns < 2:
        _config_error(f"n_turns must be >= 2, got {n_turns}.")
    config, vocab, rng = _setup(T, config, seed)
    if n_turns > config.n_keys:
        _config_error(f"{n_turns} rounds need {n_turns} distinct keys, pool has {config.n_keys}.")
    fixed = (2 + FACT_WIDTH + 3) + (1 + FACT_WIDTH + 2) * (n_turns - 1) + 3 * n_turns
    if T < fixed:
        _config_error(f"Sequence length {T} is too small for {n_turns} agentic rounds; need at least {fixed}.")
    if pairs is None:
        keys = [int(k) for k in rng.choice(config.n_keys, size=n_turns, replace=False)]
        pairs = [(k, int(rng.integers(config.n_values))) for k in keys]
    pairs = [(int(k), int(v)) for k, v in pairs]

    turns: List[_Turn] = []
    fact_starts: Dict[int, int] = {}
    position, queried = 0, 0
    for t, size in enumerate(_turn_sizes(T - fixed, n_turns)):
        k, v = pairs[t]
        body = [vocab.filler(int(i)) for i in rng.integers(0, vocab.n_fillers, size=size)]
        offset = int(rng.integers(0, size + 1))
        head = [BOS, SYS] if t == 0 else [TOOL]
        queried = 0 if t == 0 else int(rng.integers(0, t + 1))
        tail = [USER, QUERY] if t == 0 else [QUERY]
        context = head + body[:offset] + [vocab.key(k), SEP, vocab.value(v)] + body[offset:] \
            + tail + [vocab.key(pairs[queried][0])]
        fact_starts[t] = position + len(head) + offset
        turns.append(_Turn(context, TokenRole.CONTEXT))
        turns.append(_Turn([ASSIST, vocab.value(pairs[queried][1]), EOS], TokenRole.RESPONSE))
        position += len(context) + 3

    needle = fact_starts[queried]
    return _assemble(turns, TaskKind.AGENTIC, seed, [T - 2], range(needle, needle + FACT_WIDTH),
                     pairs, config.sink_window)


def _parse_facts(tokens: Sequence[int], vocab: Vocab) -> Dict[int, List[int]]:
    facts: Dict[int, List[int]] = {}
    for i in range(1, len(tokens) - 1):
        if tokens[i] == SEP and vocab.is_key(tokens[i - 1]) and (
                vocab.is_key(tokens[i + 1]) or vocab.is_value(tokens[i + 1])):
            facts.setdefault(tokens[i - 1], []).append(tokens[i + 1])
    return facts


def oracle_answer(tokens: Sequence[int], vocab: Vocab) -> Optional[List[int]]:
    """
    Rule-based answer read straight from the tokens, independent of generator state.

    The last QUERY names the question. `QUERY SEP` asks for the unique most frequent key
    before it; `QUERY key` follows `key SEP x` facts through bridging keys until values
    are reached, returning every value bound to the final key in context order. Returns
    None when the answer is undefined (missing fact, ambiguous chain, tied counts).
    """
    tokens = [int(t) for t in tokens]
    queries = [i for i, t in enumerate(tokens) if t == QUERY]
    if not queries or queries[-1] + 1 >= len(tokens):
        return None
    q = queries[-1]
    head, context = tokens[q + 1], tokens[:q]

    if head == SEP:
        counts = Counter(t for t in context if vocab.is_key(t)).most_common()
        if not counts or (len(counts) > 1 and counts[0][1] == counts[1][1]):
            return None
        return [counts[0][0]]

    if not vocab.is_key(head):
        return None
    facts = _parse_facts(context, vocab)
    current, visited = head, set()
    while True:
        successors = facts.get(current, [])
        if not successors:
            return None
        if all(vocab.is_value(s) for s in successors):
            return successors
        if len(successors) != 1 or current in visited:
            return None
        visited.add(current)
        current = successors[0]


def generate(config: TaskConfig, seed: int, pairs: Optional[Sequence[Pair]] = None,
             needle_depth: Optional[float] = None) -> Sample:
    """Dispatch on config.kind; pairs pins the answer-defining facts (make_splits uses this)."""
    T = config.seq_len
    kind = config.kind
    if kind is TaskKind.SINGLE_FACT:
        depth = config.needle_depth if needle_depth is None else needle_depth
        if depth is None:
            depth = np.random.default_rng([seed, 1]).uniform()
        return gen_single_fact(T, float(depth), seed, config, pairs[0] if pairs else None)
    if kind is TaskKind.TWO_FACT:
        return gen_two_fact(T, seed, config, pairs[0] if pairs else None)
    if kind is TaskKind.MULTI_VALUE:
        return gen_multi_value(T, seed, config, pairs)
    if kind is TaskKind.AGGREGATION:
        return gen_aggregation(T, seed, config, pairs[0][0] if pairs else None)
    return gen_multiturn_agentic(T, config.n_turns, seed, config, pairs)


GENERATORS: Dict[TaskKind, Callable[..., Sample]] = {
    TaskKind.SINGLE_FACT: gen_single_fact,
    TaskKind.TWO_FACT: gen_two_fact,
    TaskKind.MULTI_VALUE: gen_multi_value,
    TaskKind.AGGREGATION: gen_aggregation,
    TaskKind.AGENTIC: gen_multiturn_agentic,
}
