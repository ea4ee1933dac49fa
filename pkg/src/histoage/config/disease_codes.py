# Map disease group to ICD-10 code prefixes (dotted form).
# I11 and I13 are listed under both heart disease and hypertension.
DISEASE_CODE_MAP = {
    "heart": ["I20", "I21", "I22", "I23", "I24", "I25", "I50", "I11", "I13"],
    "hypertension": ["I10", "I11", "I12", "I13", "I15"],
    "joint": ["M06.0", "M06.8", "M07.0", "M07.1", "M10.0", "M10.9"],
    "osteoporosis": ["M80", "M81", "M82"],
    "osteoarthritis": ["M15", "M16", "M17", "M18", "M19"],
    "copd": ["J40", "J41", "J42", "J43", "J44", "J47", "J96"],
}

# Cancer excluding the skin band C43-C45: C00-C42 and C46-C99 (category level).
CANCER_RANGES = [("C00", "C42"), ("C46", "C99")]

# Mapped for documentation only; too rare to model.
SKIN_CODE_MAP = {
    "atopic_dermatitis": ["L20"],
    "psoriasis": ["L40"],
    "acne": ["L70"],
    "rosacea": ["L71"],
}

# Order of the modelled disease flags everywhere (cohort columns, tables, Cox covariates).
MODEL_DISEASES = ["heart", "cancer", "hypertension", "copd", "joint", "osteoarthritis", "osteoporosis"]

# Cohort CSV column for each disease flag.
DISEASE_COLUMNS = {
    "heart": "heart",
    "cancer": "cancer",
    "hypertension": "htn",
    "copd": "copd",
    "joint": "joint",
    "osteoarthritis": "oa",
    "osteoporosis": "op",
}

DISEASE_LABELS = {
    "heart": "Heart Disease",
    "cancer": "Cancer",
    "hypertension": "Hypertension",
    "copd": "COPD",
    "joint": "Joint Disease",
    "osteoarthritis": "Osteoarthritis",
    "osteoporosis": "Osteoporosis",
    "atopic_dermatitis": "Atopic Dermatitis",
    "psoriasis": "Psoriasis",
    "acne": "Acne",
    "rosacea": "Rosacea",
}
