"""Dataset directory persistence.

Layout under the dataset root:

    manifest.json             seed, case count, responder fraction, folds,
                              image size, config hash
    records.tsv               one line per case: clinical fields + labels
    tensors/<case>.<name>.ten one tensor-container file per image / mask
    pgm/<case>.pre.pgm        8-bit renderings for eyeballing
    pgm/<case>.post.pgm

Floats in records.tsv are serialized with ``repr`` so a round-trip is
exact; images/masks round-trip bit-exactly through the tensor container.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .checkpoint import atomic_write_bytes, load_tensors, save_tensors
from .errors import IntegrityError
from .phantoms import ClinicalRecord, DatasetManifest, PhantomCase

_TENSOR_FIELDS = ("pre_image", "post_image", "vessel_mask", "lobe_mask",
                  "tumor_mask_pre", "tumor_mask_post")
_RECORD_COLUMNS = ("case_id", "age", "sex", "race", "cea", "anc", "alc",
                   "nlr", "aec", "amc", "pdl1", "responder", "survival_time", "event")


def image_to_pgm(image: np.ndarray, comments: dict[str, str] | None = None) -> bytes:
    """Binary PGM (P5), [0,1] floats scaled to 0..255."""
    scaled = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    header = ["P5"]
    for key, value in (comments or {}).items():
        header.append(f"# {key}={value}")
    header.append(f"{w} {h}")
    header.append("255")
    return ("\n".join(header) + "\n").encode("ascii") + scaled.tobytes()


def persist_dataset(manifest: DatasetManifest, cases: list[PhantomCase], path: str,
                    config_hash: str = "unset"):
    if len(cases) != manifest.n_cases:
        raise IntegrityError(
            f"manifest says {manifest.n_cases} cases but {len(cases)} were provided"
        )
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "tensors"), exist_ok=True)
    os.makedirs(os.path.join(path, "pgm"), exist_ok=True)

    doc = {
        "format": "phantom-dataset v1",
        "seed": manifest.seed,
        "n_cases": manifest.n_cases,
        "responder_fraction": manifest.responder_fraction,
        "image_size": list(manifest.image_size),
        "splits": {str(k): v for k, v in sorted(manifest.splits.items())},
        "config_hash": config_hash,
    }
    atomic_write_bytes(
        os.path.join(path, "manifest.json"),
        (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    )

    lines = ["\t".join(_RECORD_COLUMNS)]
    for case in cases:
        c = case.clinical
        lines.append("\t".join([
            case.case_id, repr(c.age), c.sex, c.race, repr(c.cea), repr(c.anc),
            repr(c.alc), repr(c.nlr), repr(c.aec), repr(c.amc), c.pdl1,
            str(int(case.responder)), repr(case.survival_time), str(int(case.event)),
        ]))
    atomic_write_bytes(os.path.join(path, "records.tsv"),
                       ("\n".join(lines) + "\n").encode("utf-8"))

    meta = {"config_hash": config_hash, "seed": str(manifest.seed), "stage": "gen-data"}
    for case in cases:
        for name in _TENSOR_FIELDS:
            arr = getattr(case, name)
            arr = arr.astype(np.float32) if arr.dtype == np.bool_ else arr
            save_tensors(os.path.join(path, "tensors", f"{case.case_id}.{name}.ten"),
                         {name: arr}, meta)
        pgm_meta = {"config_hash": config_hash, "seed": str(manifest.seed)}
        atomic_write_bytes(os.path.join(path, "pgm", f"{case.case_id}.pre.pgm"),
                           image_to_pgm(case.pre_image, pgm_meta))
        atomic_write_bytes(os.path.join(path, "pgm", f"{case.case_id}.post.pgm"),
                           image_to_pgm(case.post_image, pgm_meta))


def load_dataset(path: str) -> tuple[DatasetManifest, list[PhantomCase]]:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise IOError(f"dataset manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt manifest {manifest_path}: {exc}") from exc

    manifest = DatasetManifest(
        seed=int(doc["seed"]),
        n_cases=int(doc["n_cases"]),
        responder_fraction=float(doc["responder_fraction"]),
        splits={int(k): list(v) for k, v in doc["splits"].items()},
        image_size=tuple(doc["image_size"]),
    )

    records_path = os.path.join(path, "records.tsv")
    if not os.path.exists(records_path):
        raise IOError(f"dataset records not found: {records_path}")
    with open(records_path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != _RECORD_COLUMNS:
        raise IntegrityError(f"records header mismatch in {records_path}")
    rows = lines[1:]
    if len(rows) != manifest.n_cases:
        raise IntegrityError(
            f"manifest expects {manifest.n_cases} cases, records.tsv has {len(rows)}"
        )

    cases = []
    for row in rows:
        parts = row.split("\t")
        if len(parts) != len(_RECORD_COLUMNS):
            raise IntegrityError(f"malformed record line: {row[:60]!r}")
        case_id = parts[0]
        clinical = ClinicalRecord(
            age=float(parts[1]), sex=parts[2], race=parts[3], cea=float(parts[4]),
            anc=float(parts[5]), alc=float(parts[6]), nlr=float(parts[7]),
            aec=float(parts[8]), amc=float(parts[9]), pdl1=parts[10],
        )
        arrays = {}
        for name in _TENSOR_FIELDS:
            tensor_path = os.path.join(path, "tensors", f"{case_id}.{name}.ten")
            if not os.path.exists(tensor_path):
                raise IntegrityError(f"missing tensor file for case {case_id}: {tensor_path}")
            tensors, _ = load_tensors(tensor_path)
            if name not in tensors:
                raise IntegrityError(f"tensor {name} absent from {tensor_path}")
            arrays[name] = tensors[name]
        cases.append(PhantomCase(
            case_id=case_id,
            pre_image=arrays["pre_image"],
            post_image=arrays["post_image"],
            vessel_mask=arrays["vessel_mask"].astype(bool),
            lobe_mask=arrays["lobe_mask"].astype(bool),
            tumor_mask_pre=arrays["tumor_mask_pre"].astype(bool),
            tumor_mask_post=arrays["tumor_mask_post"].astype(bool),
            clinical=clinical,
            responder=bool(int(parts[11])),
            survival_time=float(parts[12]),
            event=bool(int(parts[13])),
        ))

    listed = sorted(cid for fold in manifest.splits.values() for cid in fold)
    if listed != sorted(c.case_id for c in cases):
        raise IntegrityError("manifest splits do not partition the stored case ids")
    return manifest, cases
