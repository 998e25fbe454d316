"""Barcode dataset ingestion, normalization, and split construction.

Sequences are normalized to the five-letter alphabet A,C,G,T,N (gaps, IUPAC
ambiguity codes and anything else fold to N), then length-fixed by right
truncation / right N-padding. Splits are pure functions of (records, spec):
shuffles use numpy's PCG64 generator keyed by the spec seed, so a fixed seed
gives byte-identical partitions on every platform.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

TARGET_LEN = 660
ALPHABET = set("ACGTN")
_COMPLEMENT = str.maketrans("ACGTN", "TGCAN")

DEFAULT_COLUMNS = {"id": "processid", "sequence": "nucleotides", "species": "species", "genus": "genus"}

SPLIT_RNG_SCHEME = "pcg64-permutation-v1"  # recorded in manifests; bump on any shuffle change


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BarcodeRecord:
    record_id: str
    sequence: str
    species: str | None = None
    genus: str | None = None


@dataclass(frozen=True)
class SplitSpec:
    pretrain_train_frac: float = 0.95
    finetune_fracs: tuple[float, float, float] = (0.70, 0.20, 0.10)  # train, test, val
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.pretrain_train_frac < 1.0:
            raise DatasetError(f"pretrain_train_frac must be in (0,1), got {self.pretrain_train_frac}")
        if abs(sum(self.finetune_fracs) - 1.0) > 1e-9:
            raise DatasetError(f"finetune fractions must sum to 1, got {self.finetune_fracs}")


@dataclass
class DatasetBundle:
    pretrain_train: list[BarcodeRecord]
    pretrain_val: list[BarcodeRecord]
    ft_train: list[BarcodeRecord]
    ft_test: list[BarcodeRecord]
    ft_val: list[BarcodeRecord]
    unseen: list[BarcodeRecord]

    PARTITIONS = ("pretrain_train", "pretrain_val", "ft_train", "ft_test", "ft_val", "unseen")

    def partition(self, name: str) -> list[BarcodeRecord]:
        return getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {name: len(self.partition(name)) for name in self.PARTITIONS}


def normalize_sequence(raw: str) -> str:
    """Uppercase and fold every non-ACGT character (gaps, IUPAC codes) to N."""
    up = raw.upper()
    return "".join(ch if ch in "ACGT" else "N" for ch in up)


def fix_length(seq: str, target_len: int = TARGET_LEN) -> str:
    """Right-truncate or right-pad with N to exactly target_len."""
    if target_len <= 0:
        raise DatasetError(f"target_len must be positive, got {target_len}")
    if len(seq) >= target_len:
        return seq[:target_len]
    return seq + "N" * (target_len - len(seq))


def reverse_complement(seq: str) -> str:
    return seq.translate(_COMPLEMENT)[::-1]


def _clean_label(value: str | None) -> str | None:
    if value is None:
        return None
    value = value.strip()
    return value or None


def load_records(
    path: str,
    fmt: str = "tsv",
    columns: dict[str, str] | None = None,
    target_len: int = TARGET_LEN,
) -> list[BarcodeRecord]:
    """Load one record per row/FASTA entry, normalized and length-fixed.

    Tabular files need header columns for id and sequence; species/genus
    columns are used when present. FASTA headers follow `>id|species|genus`.
    """
    if not os.path.exists(path):
        raise DatasetError(f"dataset file not found: {path}")
    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)
    records: list[BarcodeRecord] = []
    if fmt in ("tsv", "csv"):
        delim = "\t" if fmt == "tsv" else ","
        with open(path, newline="") as f:
            reader = csv.DictReader(f, delimiter=delim)
            if reader.fieldnames is None:
                raise DatasetError(f"empty dataset: {path}")
            for key in ("id", "sequence"):
                if cols[key] not in reader.fieldnames:
                    raise DatasetError(f"missing required column {cols[key]!r} in {path}")
            has_species = cols["species"] in reader.fieldnames
            has_genus = cols["genus"] in reader.fieldnames
            for row in reader:
                seq = fix_length(normalize_sequence(row[cols["sequence"]].strip()), target_len)
                records.append(
                    BarcodeRecord(
                        record_id=row[cols["id"]].strip(),
                        sequence=seq,
                        species=_clean_label(row[cols["species"]]) if has_species else None,
                        genus=_clean_label(row[cols["genus"]]) if has_genus else None,
                    )
                )
    elif fmt == "fasta":
        for header, seq in _iter_fasta(path):
            parts = header.split("|")
            rid = parts[0].strip()
            species = _clean_label(parts[1]) if len(parts) > 1 else None
            genus = _clean_label(parts[2]) if len(parts) > 2 else None
            records.append(
                BarcodeRecord(rid, fix_length(normalize_sequence(seq), target_len), species, genus)
            )
    else:
        raise DatasetError(f"unknown format {fmt!r}; expected tsv, csv, or fasta")
    if not records:
        raise DatasetError(f"empty dataset: {path}")
    return records


def _iter_fasta(path: str):
    header, chunks = None, []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                if header is not None:
                    yield header, "".join(chunks)
                header, chunks = line[1:], []
            else:
                chunks.append(line)
    if header is not None:
        yield header, "".join(chunks)


def write_records(path: str, records: list[BarcodeRecord], fmt: str = "tsv") -> None:
    if fmt in ("tsv", "csv"):
        delim = "\t" if fmt == "tsv" else ","
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, delimiter=delim, lineterminator="\n")
            writer.writerow([DEFAULT_COLUMNS["id"], DEFAULT_COLUMNS["sequence"], DEFAULT_COLUMNS["species"], DEFAULT_COLUMNS["genus"]])
            for r in records:
                writer.writerow([r.record_id, r.sequence, r.species or "", r.genus or ""])
    elif fmt == "fasta":
        with open(path, "w") as f:
            for r in records:
                f.write(f">{r.record_id}|{r.species or ''}|{r.genus or ''}\n{r.sequence}\n")
    else:
        raise DatasetError(f"unknown format {fmt!r}")


def _allocate_three_way(n: int, fracs: tuple[float, float, float]) -> tuple[int, int, int]:
    # test and val get floor allocations; train absorbs the remainder, so a
    # species with a single record always lands in ft_train.
    n_test = int(n * fracs[1])
    n_val = int(n * fracs[2])
    return n - n_test - n_val, n_test, n_val


def build_splits(records: list[BarcodeRecord], spec: SplitSpec) -> DatasetBundle:
    """Construct pretrain / fine-tune / unseen partitions.

    Unseen rule: for every genus with at least two labeled species, one
    species (chosen by seeded shuffle) is held out entirely; its genus stays
    represented in ft_train through the remaining species. The fine-tune
    partitions are stratified per species so every seen species appears in
    ft_train. Pretraining uses everything except unseen records, split
    pretrain_train_frac / remainder.
    """
    spec.validate()
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate record_id in input records")
    labeled = [r for r in records if r.species and r.genus]
    if not labeled:
        raise DatasetError("no labeled records; cannot build fine-tune partitions")

    rng = np.random.default_rng(np.random.PCG64(spec.seed))

    by_species: dict[str, list[BarcodeRecord]] = {}
    species_genus: dict[str, str] = {}
    for r in labeled:
        by_species.setdefault(r.species, []).append(r)
        species_genus[r.species] = r.genus
    genus_species: dict[str, list[str]] = {}
    for sp in sorted(by_species):
        genus_species.setdefault(species_genus[sp], []).append(sp)

    eligible = {g: sps for g, sps in sorted(genus_species.items()) if len(sps) >= 2}
    if not eligible:
        raise DatasetError("cannot build unseen split: no genus has two or more species")
    unseen_species: set[str] = set()
    for genus in sorted(eligible):
        sps = eligible[genus]
        unseen_species.add(sps[rng.integers(len(sps))])

    unseen = [r for r in labeled if r.species in unseen_species]
    seen_labeled = [r for r in labeled if r.species not in unseen_species]
    if not seen_labeled:
        raise DatasetError("insufficient labeled data: all species were held out")

    ft_train: list[BarcodeRecord] = []
    ft_test: list[BarcodeRecord] = []
    ft_val: list[BarcodeRecord] = []
    for sp in sorted(set(r.species for r in seen_labeled)):
        members = by_species[sp]
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        n_train, n_test, n_val = _allocate_three_way(len(shuffled), spec.finetune_fracs)
        ft_train.extend(shuffled[:n_train])
        ft_test.extend(shuffled[n_train : n_train + n_test])
        ft_val.extend(shuffled[n_train + n_test :])
    if not ft_train or not ft_test or not ft_val:
        raise DatasetError("insufficient labeled data to populate all fine-tune partitions")

    pretrain_pool = [r for r in records if r.species not in unseen_species]
    order = rng.permutation(len(pretrain_pool))
    n_train = round(len(pretrain_pool) * spec.pretrain_train_frac)
    pretrain_train = [pretrain_pool[i] for i in order[:n_train]]
    pretrain_val = [pretrain_pool[i] for i in order[n_train:]]
    if not pretrain_train or not pretrain_val:
        raise DatasetError("insufficient data to populate pretraining partitions")

    bundle = DatasetBundle(pretrain_train, pretrain_val, ft_train, ft_test, ft_val, unseen)
    _check_bundle(bundle)
    return bundle


def _check_bundle(bundle: DatasetBundle) -> None:
    ft_species = {r.species for p in ("ft_train", "ft_test", "ft_val") for r in bundle.partition(p)}
    unseen_species = {r.species for r in bundle.unseen}
    if ft_species & unseen_species:
        raise DatasetError("unseen split leaks species into fine-tune partitions")
    train_genera = {r.genus for r in bundle.ft_train}
    missing = {r.genus for r in bundle.unseen} - train_genera
    if missing:
        raise DatasetError(f"unseen genera missing from ft_train: {sorted(missing)}")
    for pair in (("pretrain_train", "pretrain_val"), ("ft_train", "ft_test"), ("ft_train", "ft_val"), ("ft_test", "ft_val")):
        a = {r.record_id for r in bundle.partition(pair[0])}
        b = {r.record_id for r in bundle.partition(pair[1])}
        if a & b:
            raise DatasetError(f"partitions {pair} share record ids")


def save_bundle(out_dir: str, bundle: DatasetBundle, spec: SplitSpec, fmt: str = "tsv") -> None:
    os.makedirs(out_dir, exist_ok=True)
    lengths = {len(r.sequence) for name in bundle.PARTITIONS for r in bundle.partition(name)}
    if len(lengths) != 1:
        raise DatasetError(f"bundle sequences have mixed lengths: {sorted(lengths)}")
    for name in bundle.PARTITIONS:
        write_records(os.path.join(out_dir, f"{name}.{fmt}"), bundle.partition(name), fmt)
    manifest = {
        "format": fmt,
        "target_len": lengths.pop(),
        "rng_scheme": SPLIT_RNG_SCHEME,
        "split_spec": {
            "pretrain_train_frac": spec.pretrain_train_frac,
            "finetune_fracs": list(spec.finetune_fracs),
            "seed": spec.seed,
        },
        "counts": bundle.counts(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bundle(bundle_dir: str) -> DatasetBundle:
    with open(os.path.join(bundle_dir, "manifest.json")) as f:
        manifest = json.load(f)
    fmt = manifest["format"]
    target_len = manifest["target_len"]
    parts = {
        name: load_records(os.path.join(bundle_dir, f"{name}.{fmt}"), fmt, target_len=target_len)
        for name in DatasetBundle.PARTITIONS
    }
    bundle = DatasetBundle(**parts)
    for name, count in manifest["counts"].items():
        if len(bundle.partition(name)) != count:
            raise DatasetError(f"partition {name} count mismatch vs manifest")
    return bundle
