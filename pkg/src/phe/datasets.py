"""Synthetic dataset generators for the bundled experiments.

Three tables are produced, mirroring the structure of well-known public
benchmarks at desk scale:

* ``mushroom``: 8,124 rows with the classic odor/edibility contingency
  (odor alone predicts the class for every odor except "none").
* ``adult``-style census table: 48,842 rows, six numeric columns and eight
  categorical columns whose vocabularies total 98 items; income labels are
  drawn from a fixed ground-truth logistic model so a linear classifier
  tops out in the mid-80s.
* ``ratings``: a timestamped user/movie stream (500 users, 200 movies)
  with slowly drifting user tastes and users that join mid-stream.

Every generator is deterministic given its seed.  Row-level sampling uses
the passed seed; population-level structure (vocabularies, effect sizes)
is fixed so that reruns with different model seeds share one dataset.
"""

from __future__ import annotations

import csv

import numpy as np

# ---------------------------------------------------------------------------
# Mushroom: odor -> edibility contingency (8,124 rows)
# ---------------------------------------------------------------------------

# (odor, edible_count, poisonous_count)
MUSHROOM_CONTINGENCY = (
    ("almond", 400, 0),
    ("anise", 400, 0),
    ("creosote", 0, 192),
    ("fishy", 0, 576),
    ("foul", 0, 2160),
    ("musty", 0, 36),
    ("none", 3408, 120),
    ("pungent", 0, 256),
    ("spicy", 0, 576),
)

MUSHROOM_ROWS = sum(e + p for _, e, p in MUSHROOM_CONTINGENCY)   # 8124


def mushroom_rows(seed: int = 7) -> list[tuple[str, str]]:
    rows = []
    for odor, n_e, n_p in MUSHROOM_CONTINGENCY:
        rows += [(odor, "edible")] * n_e
        rows += [(odor, "poisonous")] * n_p
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(rows))
    return [rows[i] for i in order]


def write_mushroom_csv(path, seed: int = 7) -> int:
    rows = mushroom_rows(seed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["odor", "class"])
        w.writerows(rows)
    return len(rows)


# ---------------------------------------------------------------------------
# Census-style income table (48,842 rows, 98 categorical items)
# ---------------------------------------------------------------------------

EDUCATIONS = ("Preschool", "1st-4th", "5th-6th", "7th-8th", "9th", "10th",
              "11th", "12th", "HS-grad", "Some-college", "Assoc-voc",
              "Assoc-acdm", "Bachelors", "Masters", "Prof-school", "Doctorate")
EDUCATION_YEARS = {e: i + 1 for i, e in enumerate(EDUCATIONS)}
EDUCATION_WEIGHTS = (1, 4, 8, 15, 12, 21, 27, 10, 320, 222, 42, 32, 164, 54, 17, 12)

WORKCLASSES = ("Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
               "Local-gov", "State-gov", "Without-pay")
WORKCLASS_WEIGHTS = (736, 78, 34, 29, 64, 40, 1)

MARITAL = ("Married-civ-spouse", "Divorced", "Never-married", "Separated",
           "Widowed", "Married-spouse-absent", "Married-AF-spouse")
MARITAL_WEIGHTS = (460, 136, 330, 31, 30, 12, 1)

OCCUPATIONS = ("Tech-support", "Craft-repair", "Other-service", "Sales",
               "Exec-managerial", "Prof-specialty", "Handlers-cleaners",
               "Machine-op-inspct", "Adm-clerical", "Farming-fishing",
               "Transport-moving", "Priv-house-serv", "Protective-serv",
               "Armed-Forces")
OCCUPATION_WEIGHTS = (29, 131, 105, 117, 130, 132, 44, 64, 120, 32, 50, 5, 21, 1)

RELATIONSHIPS = ("Wife", "Own-child", "Husband", "Not-in-family",
                 "Other-relative", "Unmarried")
RELATIONSHIP_WEIGHTS = (48, 155, 404, 257, 31, 105)

RACES = ("White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black")
RACE_WEIGHTS = (855, 31, 10, 8, 96)

SEXES = ("Female", "Male")
SEX_WEIGHTS = (332, 668)

COUNTRIES = (
    "United-States", "Cambodia", "England", "Puerto-Rico", "Canada", "Germany",
    "Outlying-US", "India", "Japan", "Greece", "South", "China", "Cuba", "Iran",
    "Honduras", "Philippines", "Italy", "Poland", "Jamaica", "Vietnam", "Mexico",
    "Portugal", "Ireland", "France", "Dominican-Republic", "Laos", "Ecuador",
    "Taiwan", "Haiti", "Columbia", "Hungary", "Guatemala", "Nicaragua",
    "Scotland", "Thailand", "Yugoslavia", "El-Salvador", "Trinadad-Tobago",
    "Peru", "Hong", "Netherlands",
)
COUNTRY_WEIGHTS = (897,) + (1, 9, 11, 12, 14, 2, 10, 6, 3, 8, 8, 9, 4, 1, 20, 7,
                            6, 8, 7, 64, 4, 2, 3, 7, 2, 3, 5, 4, 6, 1, 6, 3, 1,
                            2, 2, 10, 2, 3, 2, 1)

ADULT_CATEGORICAL = {
    "education": EDUCATIONS, "workclass": WORKCLASSES, "marital_status": MARITAL,
    "occupation": OCCUPATIONS, "relationship": RELATIONSHIPS, "race": RACES,
    "sex": SEXES, "native_country": COUNTRIES,
}

ADULT_ROWS = 48842
ADULT_VOCAB_SIZE = sum(len(v) for v in ADULT_CATEGORICAL.values())   # 98

_POPULATION_SEED = 20240601


def _item_effects(rng, items, scale):
    return {item: rng.normal(0.0, scale) for item in items}


def _adult_population():
    """Fixed ground-truth effect tables, independent of the row seed."""
    rng = np.random.default_rng(_POPULATION_SEED)
    eff = {
        "education": {e: 0.55 * (EDUCATION_YEARS[e] - 9.5) / 4.0 + rng.normal(0.0, 0.75)
                      for e in EDUCATIONS},
        "occupation": _item_effects(rng, OCCUPATIONS, 0.75),
        "marital_status": {m: (1.35 if m == "Married-civ-spouse" else rng.normal(-0.55, 0.25))
                           for m in MARITAL},
        "relationship": _item_effects(rng, RELATIONSHIPS, 0.45),
        "workclass": _item_effects(rng, WORKCLASSES, 0.3),
        "race": _item_effects(rng, RACES, 0.12),
        "sex": {"Female": -0.42, "Male": 0.42},
        "native_country": _item_effects(rng, COUNTRIES, 0.2),
    }
    return eff


def adult_rows(seed: int = 11, n_rows: int = ADULT_ROWS):
    """(header, rows) of the census-style table."""
    eff = _adult_population()
    rng = np.random.default_rng(seed)

    def draw(items, weights):
        p = np.asarray(weights, dtype=np.float64)
        return rng.choice(len(items), size=n_rows, p=p / p.sum())

    cat_idx = {
        "education": draw(EDUCATIONS, EDUCATION_WEIGHTS),
        "workclass": draw(WORKCLASSES, WORKCLASS_WEIGHTS),
        "marital_status": draw(MARITAL, MARITAL_WEIGHTS),
        "occupation": draw(OCCUPATIONS, OCCUPATION_WEIGHTS),
        "relationship": draw(RELATIONSHIPS, RELATIONSHIP_WEIGHTS),
        "race": draw(RACES, RACE_WEIGHTS),
        "sex": draw(SEXES, SEX_WEIGHTS),
        "native_country": draw(COUNTRIES, COUNTRY_WEIGHTS),
    }
    cats = {col: [ADULT_CATEGORICAL[col][i] for i in idx] for col, idx in cat_idx.items()}

    age = np.clip(rng.gamma(7.0, 5.6, n_rows) + 17, 17, 90).round()
    fnlwgt = np.clip(rng.lognormal(12.0, 0.55, n_rows), 1e4, 1.5e6).round()
    education_years = np.array([EDUCATION_YEARS[e] for e in cats["education"]], dtype=np.float64)
    has_gain = rng.random(n_rows) < 0.085
    capital_gain = np.where(has_gain, rng.lognormal(8.3, 1.0, n_rows), 0.0).round()
    has_loss = rng.random(n_rows) < 0.047
    capital_loss = np.where(has_loss, rng.normal(1870, 320, n_rows), 0.0).clip(0).round()
    hours = np.clip(rng.normal(40.4, 12.0, n_rows), 1, 99).round()

    score = np.full(n_rows, -3.05)
    for col in ADULT_CATEGORICAL:
        table = eff[col]
        score += np.array([table[v] for v in cats[col]])
    score += 0.030 * (age - 38.6) - 0.00032 * (age - 38.6) ** 2
    score += 0.034 * (hours - 40.4)
    score += 0.16 * (education_years - 10.0)
    score += np.where(capital_gain > 5000, 2.6, 0.00022 * capital_gain)
    score += np.where(capital_loss > 1500, 0.9, 0.0)
    prob = 1.0 / (1.0 + np.exp(-1.6 * score))
    income = np.where(rng.random(n_rows) < prob, ">50K", "<=50K")

    header = ["age", "fnlwgt", "education_years", "capital_gain", "capital_loss",
              "hours_per_week", "education", "workclass", "marital_status",
              "occupation", "relationship", "race", "sex", "native_country", "income"]
    numeric = np.column_stack([age, fnlwgt, education_years, capital_gain,
                               capital_loss, hours])
    rows = []
    for i in range(n_rows):
        rows.append([f"{x:.0f}" for x in numeric[i]]
                    + [cats[c][i] for c in ADULT_CATEGORICAL]
                    + [income[i]])
    return header, rows


def write_adult_csv(path, seed: int = 11, n_rows: int = ADULT_ROWS) -> int:
    header, rows = adult_rows(seed, n_rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return len(rows)


# ---------------------------------------------------------------------------
# Rating stream: drifting preferences, growing user base
# ---------------------------------------------------------------------------

N_USERS = 500
N_MOVIES = 200
N_GENRES = 5
RATING_DAYS = 60
RATINGS_PER_DAY = 400


def rating_rows(seed: int = 13, days: int = RATING_DAYS,
                per_day: int = RATINGS_PER_DAY):
    """Timestamped (user, movie, genres, rating) tuples in [0, 1].

    Sixty percent of users are active from day one; the rest join at a
    uniformly random later day.  User taste vectors random-walk slowly, so
    remembering a recurring user pays off but stale estimates decay.
    """
    pop = np.random.default_rng(_POPULATION_SEED + 1)
    rank = 4
    u = pop.normal(0.0, 0.75, (N_USERS, rank))
    v = pop.normal(0.0, 0.75, (N_MOVIES, rank))
    genre_primary = pop.integers(0, N_GENRES, N_MOVIES)
    genre_extra = pop.integers(0, N_GENRES, N_MOVIES)
    has_extra = pop.random(N_MOVIES) < 0.35
    genres = np.zeros((N_MOVIES, N_GENRES))
    genres[np.arange(N_MOVIES), genre_primary] = 1.0
    genres[np.where(has_extra)[0], genre_extra[has_extra]] = 1.0
    affinity = pop.normal(0.0, 0.5, (N_USERS, N_GENRES))
    join_day = np.zeros(N_USERS, dtype=int)
    late = pop.random(N_USERS) < 0.4
    join_day[late] = pop.integers(1, days, late.sum())
    user_pop = pop.gamma(1.2, 1.0, N_USERS)
    movie_pop = pop.gamma(1.0, 1.0, N_MOVIES)

    rng = np.random.default_rng(seed)
    rows = []
    for day in range(days):
        active = np.where(join_day <= day)[0]
        pw = user_pop[active]
        users = active[rng.choice(len(active), per_day, p=pw / pw.sum())]
        movies = rng.choice(N_MOVIES, per_day, p=movie_pop / movie_pop.sum())
        raw = (0.5
               + 0.115 * np.einsum("ir,ir->i", u[users], v[movies])
               + 0.09 * np.einsum("ig,ig->i", affinity[users], genres[movies])
               + rng.normal(0.0, 0.06, per_day))
        ratings = np.clip(raw, 0.0, 1.0)
        for i in range(per_day):
            rows.append((f"u{users[i]}", f"m{movies[i]}", genres[movies[i]],
                         ratings[i], float(day)))
        u += rng.normal(0.0, 0.02, u.shape)        # slow taste drift
    return rows


def write_rating_csv(path, seed: int = 13, days: int = RATING_DAYS,
                     per_day: int = RATINGS_PER_DAY) -> int:
    rows = rating_rows(seed, days, per_day)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "movie_id"] + [f"g{i}" for i in range(N_GENRES)]
                   + ["rating", "day"])
        for user, movie, g, rating, day in rows:
            w.writerow([user, movie] + [f"{x:.0f}" for x in g]
                       + [f"{rating:.6f}", f"{day:.1f}"])
    return len(rows)


GENERATORS = {
    "mushroom": write_mushroom_csv,
    "adult": write_adult_csv,
    "ratings": write_rating_csv,
}


def write_all(out_dir, seeds: dict | None = None) -> dict:
    """Generate every bundled table into `out_dir`; returns name -> path."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    seeds = seeds or {}
    paths = {}
    for name, gen in GENERATORS.items():
        path = os.path.join(out_dir, f"{name}.csv")
        if name in seeds:
            gen(path, seed=seeds[name])
        else:
            gen(path)
        paths[name] = path
    return paths
