"""ICD-10 code -> disease group mapping."""
import re

from histoage.config.disease_codes import (
    CANCER_RANGES,
    DISEASE_CODE_MAP,
    MODEL_DISEASES,
    SKIN_CODE_MAP,
)
from histoage.utils.errors import DataError

CODE_PATTERN = re.compile(r"^[A-Z]\d{2}(\.\d+)?$")
UNDOTTED_PATTERN = re.compile(r"^([A-Z]\d{2})(\d+)$")

# Primary group when a code belongs to several (I11/I13 -> heart disease first).
GROUP_PRIORITY = ["heart", "hypertension", "joint", "osteoporosis", "osteoarthritis", "copd", "cancer"]


def normalize_code(code: str) -> str:
    """Upper-case, strip, and insert the dot into undotted forms (M060 -> M06.0)."""
    if not isinstance(code, str):
        raise DataError(f"malformed ICD-10 code: {code!r}")
    cleaned = code.strip().upper()
    match = UNDOTTED_PATTERN.match(cleaned)
    if match:
        cleaned = f"{match.group(1)}.{match.group(2)}"
    if not CODE_PATTERN.match(cleaned):
        raise DataError(f"malformed ICD-10 code: {code!r}")
    return cleaned


def _matches(code: str, prefix: str) -> bool:
    if "." in prefix:
        return code == prefix or code.startswith(prefix)
    return code[:3] == prefix


def _is_cancer(code: str) -> bool:
    category = code[:3]
    return any(lo <= category <= hi for lo, hi in CANCER_RANGES)


def icd10_groups(code: str) -> list:
    """Every modelled and documentation-only group the code belongs to."""
    code = normalize_code(code)
    groups = [group for group in GROUP_PRIORITY if group != "cancer"
              and any(_matches(code, prefix) for prefix in DISEASE_CODE_MAP[group])]
    if _is_cancer(code):
        groups.append("cancer")
    groups.extend(group for group, prefixes in SKIN_CODE_MAP.items() if any(_matches(code, p) for p in prefixes))
    return groups


def map_icd10(code: str) -> str | None:
    """Primary disease group of a code, or None."""
    groups = icd10_groups(code)
    return groups[0] if groups else None


def is_modelled(group: str | None) -> bool:
    return group in MODEL_DISEASES


def flags_from_codes(codes) -> dict:
    """Disease flags (0/1 per modelled group) from a subject's diagnosis codes."""
    flags = {disease: 0 for disease in MODEL_DISEASES}
    for code in codes:
        for group in icd10_groups(code):
            if group in flags:
                flags[group] = 1
    return flags
