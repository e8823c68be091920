"""Seeded universal hashing of categorical items into bucket indices.

Each item string is hashed K times into the embedding-table index space
[0, B) and once into the weight-table index space [0, P).  The concrete
hash is FNV-1a (64-bit) over the seed, serialized as 8 big-endian bytes,
followed by the UTF-8 bytes of the item.  FNV-1a is bit-stable across
platforms and trivial to reimplement, which the reproducibility tests
rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

_MASK64 = 0xFFFFFFFFFFFFFFFF

# FNV-1a 64-bit constants
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211


def fnv1a64(data: bytes) -> int:
    """FNV-1a hash of a byte string, reduced mod 2^64."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def splitmix64(x: int) -> int:
    """One step of the splitmix64 sequence; used to derive hash seeds."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seeds(experiment_seed: int, count: int) -> tuple[int, ...]:
    """Derive `count` pairwise-distinct 64-bit seeds from one integer."""
    seeds: list[int] = []
    state = experiment_seed & _MASK64
    while len(seeds) < count:
        state = splitmix64(state)
        if state not in seeds:
            seeds.append(state)
    return tuple(seeds)


@dataclass(frozen=True)
class HashSpec:
    """Index-space definition: B embedding buckets addressed by K seeded
    hash functions, plus P weight buckets addressed by one more.

    `seeds` holds K+1 pairwise-distinct values; the last one indexes the
    weight table.  B need not be prime, though primes spread residues a
    little better for structured vocabularies.
    """

    bucket_count_B: int
    hash_count_K: int
    weight_buckets_P: int
    embed_dim_d: int
    seeds: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.bucket_count_B < 1:
            raise ValueError(f"bucket_count_B must be >= 1, got {self.bucket_count_B}")
        if self.hash_count_K < 1:
            raise ValueError(f"hash_count_K must be >= 1, got {self.hash_count_K}")
        if self.weight_buckets_P < 1:
            raise ValueError(f"weight_buckets_P must be >= 1, got {self.weight_buckets_P}")
        if self.embed_dim_d < 1:
            raise ValueError(f"embed_dim_d must be >= 1, got {self.embed_dim_d}")
        if len(self.seeds) != self.hash_count_K + 1:
            raise ValueError(
                f"need {self.hash_count_K + 1} seeds (K for the embedding table, "
                f"1 for the weight table), got {len(self.seeds)}"
            )
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be pairwise distinct")

    @classmethod
    def from_seed(cls, bucket_count: int, num_hashes: int, weight_buckets: int,
                  embed_dim: int, seed: int) -> "HashSpec":
        """Build a spec whose seed family derives from one experiment seed."""
        return cls(
            bucket_count_B=bucket_count,
            hash_count_K=num_hashes,
            weight_buckets_P=weight_buckets,
            embed_dim_d=embed_dim,
            seeds=derive_seeds(seed, num_hashes + 1),
        )

    def to_config(self) -> dict:
        return {
            "bucket_count": self.bucket_count_B,
            "num_hashes": self.hash_count_K,
            "weight_buckets": self.weight_buckets_P,
            "embed_dim": self.embed_dim_d,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "HashSpec":
        if "seeds" in cfg:
            return cls(
                bucket_count_B=cfg["bucket_count"],
                hash_count_K=cfg["num_hashes"],
                weight_buckets_P=cfg["weight_buckets"],
                embed_dim_d=cfg["embed_dim"],
                seeds=tuple(cfg["seeds"]),
            )
        return cls.from_seed(
            cfg["bucket_count"], cfg["num_hashes"], cfg["weight_buckets"],
            cfg["embed_dim"], cfg["seed"],
        )


def hash_item(spec: HashSpec, k: int, item: str) -> int:
    """Bucket index of `item` under the k-th embedding-table hash."""
    if not 0 <= k < spec.hash_count_K:
        raise ValueError(f"hash index {k} out of range [0, {spec.hash_count_K})")
    payload = spec.seeds[k].to_bytes(8, "big") + item.encode("utf-8")
    return fnv1a64(payload) % spec.bucket_count_B


def hash_weight(spec: HashSpec, item: str) -> int:
    """Row index of `item` in the weight table."""
    payload = spec.seeds[spec.hash_count_K].to_bytes(8, "big") + item.encode("utf-8")
    return fnv1a64(payload) % spec.weight_buckets_P


def hash_signature(spec: HashSpec, item: str) -> tuple[list[int], int]:
    """All K embedding indices (in hash order) plus the weight index."""
    return [hash_item(spec, k, item) for k in range(spec.hash_count_K)], hash_weight(spec, item)
