from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.configs import TaskConfig, TaskKind
from src.taskgen.generators import Pair, generate
from src.taskgen.sample import Sample
from src.utils.errors import TaskError
from src.utils.get_size import get_size
from src.utils.monitors import DataOperation, HighLevelErrors

TRAIN_SPLIT, EVAL_SPLIT = 0, 1


def sample_seed(seed: int, split: int, index: int) -> int:
    """Independent per-sample seed derived from (run seed, split, index)."""
    return int(np.random.SeedSequence([seed, split, index]).generate_state(1)[0])


def partition_fact_pairs(config: TaskConfig, seed: int) -> Tuple[List[Pair], List[Pair]]:
    """
    Disjoint (train, eval) pools over the key x value grid. The aggregation kind has no
    values and splits the key pool instead (pairs carry value -1).
    """
    rng = np.random.default_rng([seed, 7])
    if config.kind is TaskKind.AGGREGATION:
        grid = [(k, -1) for k in range(config.n_keys)]
    else:
        grid = [(k, v) for k in range(config.n_keys) for v in range(config.n_values)]
    order = rng.permutation(len(grid))
    n_eval = max(1, min(len(grid) - 1, int(round(config.eval_pair_fraction * len(grid)))))
    eval_pool = [grid[i] for i in order[:n_eval]]
    train_pool = [grid[i] for i in order[n_eval:]]
    return train_pool, eval_pool


def _by_key(pool: Sequence[Pair]) -> Dict[int, List[int]]:
    grouped: Dict[int, List[int]] = {}
    for k, v in pool:
        grouped.setdefault(k, []).append(v)
    return grouped


def _pick_pairs(config: TaskConfig, pool: Sequence[Pair], rng: np.random.Generator) -> List[Pair]:
    if config.kind in (TaskKind.SINGLE_FACT, TaskKind.TWO_FACT, TaskKind.AGGREGATION):
        return [pool[int(rng.integers(len(pool)))]]

    grouped = _by_key(pool)
    if config.kind is TaskKind.MULTI_VALUE:
        eligible = sorted(k for k, values in grouped.items() if len(values) >= 2)
        if not eligible:
            _task_error("no key in the pool has two values; raise eval_pair_fraction or the pool sizes")
        k = int(rng.choice(eligible))
        v1, v2 = (int(v) for v in rng.choice(grouped[k], size=2, replace=False))
        return [(k, v1), (k, v2)]

    keys = sorted(grouped)
    if len(keys) < config.n_turns:
        _task_error(f"pool spans {len(keys)} keys but {config.n_turns} agentic rounds need distinct keys")
    chosen = [int(k) for k in rng.choice(keys, size=config.n_turns, replace=False)]
    return [(k, int(rng.choice(grouped[k]))) for k in chosen]


def _task_error(detail: str) -> None:
    message = f"Cannot build split: {detail}."
    HighLevelErrors.error(message)
    raise TaskError(message)


def make_splits(config: TaskConfig, n_train: Optional[int] = None, n_eval: Optional[int] = None,
                seed: Optional[int] = None) -> Tuple[List[Sample], List[Sample]]:
    """
    Generate train and eval sets whose answer-defining fact pairs come from disjoint
    pools, so eval accuracy measures retrieval rather than memorized pairs.

    Parameters:
        config (TaskConfig): Task kind, lengths and pool sizes.
        n_train / n_eval / seed: Override the config values when given.

    Returns:
        tuple[list[Sample], list[Sample]]: Exactly n_train and n_eval samples.
    """
    n_train = config.n_train if n_train is None else int(n_train)
    n_eval = config.n_eval if n_eval is None else int(n_eval)
    seed = config.seed if seed is None else int(seed)
    train_pool, eval_pool = partition_fact_pairs(config, seed)

    splits = []
    for split, pool, count in ((TRAIN_SPLIT, train_pool, n_train), (EVAL_SPLIT, eval_pool, n_eval)):
        samples = []
        for index in range(count):
            s = sample_seed(seed, split, index)
            pairs = _pick_pairs(config, pool, np.random.default_rng(s))
            samples.append(generate(config, s, pairs))
        splits.append(samples)

    DataOperation.info(f"Generated {config.kind.value} splits: {n_train} train / {n_eval} eval "
                       f"(T={config.seq_len}, {len(train_pool)}/{len(eval_pool)} pool pairs).")
    return splits[0], splits[1]


def save_dataset(samples: Sequence[Sample], path: Union[str, Path]) -> Path:
    """One JSON record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as file:
        for sample in samples:
            file.write(sample.to_json() + "\n")
    DataOperation.info(f"Wrote {len(samples)} samples to {path} ({get_size(path)}).")
    return path


def load_dataset(path: Union[str, Path]) -> List[Sample]:
    path = Path(path)
    if not path.exists():
        message = f"Dataset file does not exist: {path}"
        HighLevelErrors.error(message)
        raise FileNotFoundError(message)
    samples = []
    with open(path, "r") as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                samples.append(Sample.from_json(line))
            except (ValueError, KeyError) as e:
                message = f"{path}:{line_number}: invalid sample record: {e}"
                HighLevelErrors.error(message)
                raise TaskError(message) from e
    DataOperation.info(f"Loaded {len(samples)} samples from {path}.")
    return samples
