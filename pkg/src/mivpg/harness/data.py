"""Synthetic witness-detection MIL tasks.

A bag is positive iff it holds at least one instance within ``epsilon`` of a
fixed witness vector. Background instances are standard normal; positives
get the witness (plus a small jitter inside the epsilon ball) at a uniformly
random position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, GenerationError
from ..model import Bag
from ..rng import Rng


@dataclass(frozen=True)
class SyntheticTaskSpec:
    scenario: int = 3
    instance_dim: int = 32
    num_bags: int = 1000
    # M for scenario 1, N (images per sample) for scenarios 2 and 3
    min_instances: int = 2
    max_instances: int = 8
    # patches per image, scenario 3 only
    min_patches: int = 4
    max_patches: int = 16
    witness_norm: float = 5.0
    epsilon: float = 0.5
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise ConfigError(f"scenario must be 1, 2 or 3, got {self.scenario}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if self.scenario == 3 and not 1 <= self.min_patches <= self.max_patches:
            raise ConfigError("need 1 <= min_patches <= max_patches")
        if self.epsilon < 0 or not 0 <= self.label_noise < 0.5:
            raise ConfigError("epsilon must be >= 0 and label_noise in [0, 0.5)")
        if self.witness_norm <= self.epsilon:
            raise ConfigError("witness must sit outside the epsilon ball around the origin")


@dataclass
class Example:
    bag: Bag
    label: int
    # (image, patch) of the injected witness, None for negatives
    witness_at: tuple[int, int] | None = None


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    witness: np.ndarray
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i) -> Example:
        return self.examples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples])

    def split(self, seed: int, fractions=(0.7, 0.1, 0.2)) -> tuple[list[Example], list[Example], list[Example]]:
        """Shuffled train/val/test partition."""
        n = len(self.examples)
        order = Rng(seed).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        pick = lambda idx: [self.examples[i] for i in idx]
        return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def contains_witness(bag: Bag, witness: np.ndarray, epsilon: float) -> bool:
    """Ground-truth MIL rule: any instance within epsilon of the witness."""
    dist = np.linalg.norm(bag.instances - witness, axis=1)
    return bool(np.any(dist <= epsilon))


def _draw_labels(rng: Rng, n: int, tries: int = 100) -> np.ndarray:
    for _ in range(tries):
        labels = (rng.uniform(n) < 0.5).astype(np.int64)
        if 0.4 <= labels.mean() <= 0.6:
            return labels
    raise GenerationError(f"could not balance {n} labels into [0.4, 0.6] after {tries} draws")


def _background(rng: Rng, shape, witness: np.ndarray, epsilon: float) -> np.ndarray:
    x = rng.normal(shape)
    for _ in range(100):
        close = np.linalg.norm(x - witness, axis=1) <= epsilon
        if not close.any():
            return x
        x[close] = rng.normal((int(close.sum()), shape[1]))
    raise GenerationError("background instances keep landing inside the witness ball")


def generate_task(spec: SyntheticTaskSpec) -> Dataset:
    rng = Rng(spec.seed)
    d = spec.instance_dim
    direction = rng.normal(d)
    witness = spec.witness_norm * direction / np.linalg.norm(direction)
    labels = _draw_labels(rng, spec.num_bags)
    examples = []
    for label in labels:
        n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        if spec.scenario == 1:
            counts = [n]
        elif spec.scenario == 2:
            counts = [1] * n
        else:
            counts = [int(c) for c in rng.integers(spec.min_patches, spec.max_patches + 1, n)]
        groups = [_background(rng, (c, d), witness, spec.epsilon) for c in counts]
        where = None
        if label:
            image = int(rng.integers(0, len(groups)))
            patch = int(rng.integers(0, counts[image]))
            jitter = rng.normal(d)
            radius = 0.5 * spec.epsilon * rng.uniform()
            norm = np.linalg.norm(jitter)
            groups[image][patch] = witness + (radius / norm * jitter if norm > 0 else 0.0)
            where = (image, patch)
        bag = Bag(groups, hierarchical=spec.scenario != 1)
        noisy = int(label)
        if spec.label_noise and rng.uniform() < spec.label_noise:
            noisy = 1 - noisy
        examples.append(Example(bag, noisy, where))
    return Dataset(spec, witness, examples)
