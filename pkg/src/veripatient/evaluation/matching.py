"""Top-1 diagnosis matching."""

from __future__ import annotations

import string

_TRAILING = string.punctuation + " "


def normalize_label(text: str) -> str:
    return " ".join(text.lower().split()).rstrip(_TRAILING)


def match_diagnosis(predicted: str | None, gold_label: str, gold_icd10: str = "") -> bool:
    """Exact match after normalization, or the gold ICD-10 code appears in the prediction."""
    if not predicted or not predicted.strip():
        return False
    if normalize_label(predicted) == normalize_label(gold_label):
        return True
    icd = gold_icd10.strip().lower()
    return bool(icd) and icd in predicted.lower()
