"""Synthetic barcode corpus: genus-level template + species-level motif block
+ per-base substitution noise.

Every genus gets a random template; each of its species overwrites one
contiguous block (at a genus-specific offset) with its own random motif, so
genus identity lives in the shared template and species identity in the
block. Records are the species template with i.i.d. substitution noise.
"""

from __future__ import annotations

import numpy as np

from .data import BarcodeRecord, TARGET_LEN

BASES = np.array(list("ACGT"))
SPECIES_BLOCK_FRAC = 0.15  # fraction of the sequence carrying the species motif


def generate_corpus(
    genera: int,
    species_per_genus: int,
    per_species: int,
    noise: float,
    seed: int = 0,
    target_len: int = TARGET_LEN,
) -> list[BarcodeRecord]:
    if min(genera, species_per_genus, per_species) < 1:
        raise ValueError("genera, species_per_genus, and per_species must all be >= 1")
    if not 0.0 <= noise < 1.0:
        raise ValueError(f"noise must be in [0, 1), got {noise}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    block = max(8, int(SPECIES_BLOCK_FRAC * target_len))
    block = min(block, target_len)
    records: list[BarcodeRecord] = []
    counter = 0
    for g in range(genera):
        genus_name = f"Genus{g:02d}"
        template = rng.integers(0, 4, size=target_len)
        offset = int(rng.integers(0, target_len - block + 1))
        for s in range(species_per_genus):
            species_name = f"{genus_name} species{s:02d}"
            sp_template = template.copy()
            sp_template[offset : offset + block] = rng.integers(0, 4, size=block)
            for _ in range(per_species):
                seq = sp_template.copy()
                if noise > 0:
                    hit = rng.random(target_len) < noise
                    seq[hit] = rng.integers(0, 4, size=int(hit.sum()))
                records.append(
                    BarcodeRecord(
                        record_id=f"synth{counter:06d}",
                        sequence="".join(BASES[seq]),
                        species=species_name,
                        genus=genus_name,
                    )
                )
                counter += 1
    return records


def hamming_stats(records: list[BarcodeRecord], rng_seed: int = 0, pairs: int = 200) -> dict[str, float]:
    """Mean Hamming distance within species and across genera (sampled)."""
    rng = np.random.default_rng(np.random.PCG64(rng_seed))
    by_species: dict[str, list[str]] = {}
    by_genus: dict[str, list[str]] = {}
    for r in records:
        by_species.setdefault(r.species, []).append(r.sequence)
        by_genus.setdefault(r.genus, []).append(r.sequence)

    def ham(a: str, b: str) -> int:
        return sum(x != y for x, y in zip(a, b))

    within = []
    species_with_pairs = [sps for sps in by_species.values() if len(sps) >= 2]
    if not species_with_pairs or len(by_genus) < 2:
        raise ValueError("hamming_stats needs >=2 records in some species and >=2 genera")
    for _ in range(pairs):
        sps = species_with_pairs[rng.integers(len(species_with_pairs))]
        i, j = rng.choice(len(sps), size=2, replace=False)
        within.append(ham(sps[i], sps[j]))

    genera = sorted(by_genus)
    cross = []
    for _ in range(pairs):
        g1, g2 = rng.choice(len(genera), size=2, replace=False)
        s1 = by_genus[genera[g1]]
        s2 = by_genus[genera[g2]]
        cross.append(ham(s1[rng.integers(len(s1))], s2[rng.integers(len(s2))]))

    return {"within_species": float(np.mean(within)), "cross_genus": float(np.mean(cross))}
