"""Synthetic dating ratings with an imbalanced OGIR structure.

Each user prefers the opposite gender with a personal probability drawn from
one of three orientation profiles (mostly-opposite majority, mixed, mostly
same). Who they rate within a gender pool follows a latent taste model in
which a ratee's appeal to opposite-gender raters and to same-gender raters
are independent traits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ogirfair.dataset import Interaction

# (share of users, Beta(a, b) for the opposite-gender preference)
DEFAULT_PROFILES = (
    (0.6, (19.0, 1.0)),
    (0.2, (6.0, 6.0)),
    (0.2, (1.0, 19.0)),
)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    female_share: float = 0.45
    unknown_share: float = 0.03
    mean_degree: float = 22.0
    degree_sigma: float = 0.6
    latent_dim: int = 8
    taste_strength: float = 3.0
    popularity_sigma: float = 0.8
    top_rating_share: float = 0.8
    profiles: tuple = DEFAULT_PROFILES
    seed: int = 0


def generate(config: SynthConfig = SynthConfig()) -> tuple[list[Interaction], dict[int, str]]:
    """Return ``(interactions, genders)``; users with unknown gender get ``"U"``."""
    rng = np.random.default_rng(config.seed)
    n = config.n_users
    female = rng.random(n) < config.female_share
    unknown = rng.random(n) < config.unknown_share

    shares = np.array([s for s, _ in config.profiles], dtype=float)
    profile = rng.choice(len(shares), size=n, p=shares / shares.sum())
    beta = np.array([ab for _, ab in config.profiles], dtype=float)
    pref_opposite = rng.beta(beta[profile, 0], beta[profile, 1])

    d = config.latent_dim
    scale = config.taste_strength / np.sqrt(d)
    taste = rng.normal(size=(n, d))
    appeal_opp = rng.normal(size=(n, d))
    appeal_same = rng.normal(size=(n, d))
    pop_opp = rng.normal(0.0, config.popularity_sigma, n)
    pop_same = rng.normal(0.0, config.popularity_sigma, n)
    logit_opp = scale * taste @ appeal_opp.T + pop_opp
    logit_same = scale * taste @ appeal_same.T + pop_same

    mu = np.log(config.mean_degree) - config.degree_sigma**2 / 2
    degree = np.maximum(3, np.round(rng.lognormal(mu, config.degree_sigma, n))).astype(int)

    rows: list[Interaction] = []
    for u in range(n):
        opposite_pool = np.flatnonzero(female != female[u])
        same_pool = np.flatnonzero((female == female[u]) & (np.arange(n) != u))
        n_opp = rng.binomial(degree[u], pref_opposite[u])
        picks = []
        for pool, logits, m in ((opposite_pool, logit_opp[u], n_opp),
                                (same_pool, logit_same[u], degree[u] - n_opp)):
            m = min(m, pool.size)
            if m <= 0:
                continue
            keys = logits[pool] + rng.gumbel(size=pool.size)
            picks.extend(pool[np.argpartition(-keys, m - 1)[:m]])
        for v in picks:
            top = rng.random() < config.top_rating_share
            rating = 10 if top else int(rng.integers(1, 10))
            rows.append(Interaction(u, int(v), rating))

    genders = {u: ("U" if unknown[u] else "F" if female[u] else "M") for u in range(n)}
    rows.sort()
    return rows, genders
