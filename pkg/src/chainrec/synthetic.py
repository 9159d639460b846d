"""Small latent-factor rating corpus in MovieLens-1M layout.

The bundled copy under ``chainrec/data/synthetic`` was produced with
``write_synthetic_movielens(dir, seed=7)``; tests check it still matches.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import ML_AGE_BANDS, RatingCorpus, parse_movielens

GENRES = ["Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary",
          "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance",
          "Sci-Fi", "Thriller", "War", "Western"]

_ADJECTIVES = ["Silent", "Crimson", "Hidden", "Last", "Broken", "Golden", "Lonely", "Wild",
               "Frozen", "Distant", "Electric", "Secret", "Midnight", "Burning", "Hollow",
               "Endless", "Paper", "Iron", "Velvet", "Savage", "Gentle", "Restless", "Bright",
               "Northern", "Quiet"]
_NOUNS = ["Harbor", "Garden", "Empire", "River", "Signal", "Mirror", "Station", "Orchard",
          "Frontier", "Carnival", "Lighthouse", "Archive", "Valley", "Machine", "Summer",
          "Witness", "Island", "Bridge", "Kingdom", "Voyage"]

BUNDLED_SEED = 7


def synthetic_movielens_lines(n_users: int = 200, n_items: int = 500, seed: int = BUNDLED_SEED,
                              dim: int = 4) -> tuple[list[str], list[str], list[str]]:
    """Return (ratings, users, movies) lines.

    Ratings come from a low-rank preference model with per-user bias; about
    one user in six is a harsh rater so that the positive-count filter has
    something to remove.
    """
    if n_items > len(_ADJECTIVES) * len(_NOUNS):
        raise ValueError("too many items for the title generator")
    rng = np.random.default_rng(seed)

    item_vec = rng.normal(size=(n_items, dim))
    user_vec = rng.normal(size=(n_users, dim))
    bias = rng.normal(0.3, 0.3, size=n_users)
    harsh = rng.random(n_users) < 1 / 6
    bias[harsh] -= 1.6
    popularity = rng.pareto(1.5, size=n_items) + 1.0
    popularity /= popularity.sum()

    movies = []
    for j in range(n_items):
        title = f"The {_ADJECTIVES[j // len(_NOUNS)]} {_NOUNS[j % len(_NOUNS)]} ({1950 + j % 50})"
        k = 1 + rng.integers(3)
        genres = "|".join(sorted(rng.choice(GENRES, size=k, replace=False)))
        movies.append(f"{j + 1}::{title}::{genres}")

    ages = list(ML_AGE_BANDS)
    users = []
    for u in range(n_users):
        gender = "M" if rng.random() < 0.5 else "F"
        age = ages[rng.integers(len(ages))]
        occ = int(rng.integers(21))
        users.append(f"{u + 1}::{gender}::{age}::{occ}::{10000 + int(rng.integers(90000))}")

    ratings = []
    t0 = 956_703_932
    for u in range(n_users):
        n = int(rng.integers(12, 61))
        items = rng.choice(n_items, size=n, replace=False, p=popularity)
        score = 3.2 + bias[u] + 0.6 * (item_vec[items] @ user_vec[u]) + rng.normal(0, 0.5, size=n)
        stars = np.clip(np.rint(score), 1, 5).astype(int)
        ts = t0 + np.sort(rng.integers(0, 3 * 10**7, size=n))
        for j, r, t in zip(items, stars, ts):
            ratings.append(f"{u + 1}::{j + 1}::{r}::{t}")
    return ratings, users, movies


def write_synthetic_movielens(directory, **kwargs) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ratings, users, movies = synthetic_movielens_lines(**kwargs)
    for name, lines in (("ratings.dat", ratings), ("users.dat", users), ("movies.dat", movies)):
        (directory / name).write_text("".join(line + "\n" for line in lines), encoding="iso-8859-1")
    return directory


def bundled_paths() -> dict[str, Path]:
    root = resources.files("chainrec") / "data" / "synthetic"
    return {name: Path(str(root / f"{name}.dat")) for name in ("ratings", "users", "movies")}


def load_bundled() -> RatingCorpus:
    """The shipped 200-user, 500-item synthetic corpus (unfiltered)."""
    p = bundled_paths()
    return parse_movielens(p["ratings"], p["users"], p["movies"])
