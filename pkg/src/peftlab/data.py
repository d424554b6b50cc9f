"""Synthetic ICU cohorts, prompt templates, few-shot assembly, and the
word-level tokenizer.

Records are sampled on quantized grids (0.5 C temperature steps, 5 bpm heart
rate steps, 1000/uL white-cell steps, ...) so that a cohort's numeric
vocabulary stays small enough for a toy model to learn value thresholds.
Labels are pure functions of the record: a SIRS-style rule for sepsis, a
risk score for mortality, and a findings template for the note target.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass

import numpy as np

TASKS = ("sepsis", "mortality", "note")

YES, NO, UNPARSEABLE = "Yes", "No", "Unparseable"

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

SEPSIS_QUESTION = "Does the patient have sepsis? Answer:"
MORTALITY_QUESTION = "Will the patient die during the hospital stay? Answer:"
NOTE_INSTRUCTION = "Task: Generate clinical note."


class ConfigError(ValueError):
    pass


@dataclass
class PatientRecord:
    temperature_c: float
    heart_rate_bpm: float
    sbp_mmhg: float
    dbp_mmhg: float
    resp_rate: float
    wbc_per_ul: float
    spo2_pct: float
    lactate_mmol: float
    creatinine_mg_dl: float
    age_years: int
    chf_history: bool
    urine_output_low: bool


@dataclass
class LabeledExample:
    task: str
    prompt_text: str
    target_text: str
    record: PatientRecord

    def to_dict(self) -> dict:
        return {"task": self.task, "prompt_text": self.prompt_text,
                "target_text": self.target_text, "record": asdict(self.record)}

    @staticmethod
    def from_dict(d: dict) -> "LabeledExample":
        return LabeledExample(d["task"], d["prompt_text"], d["target_text"],
                              PatientRecord(**d["record"]))


# --- label rules ---------------------------------------------------------

def sirs_criteria(r: PatientRecord) -> int:
    return sum([
        r.temperature_c > 38.0 or r.temperature_c < 36.0,
        r.heart_rate_bpm > 90,
        r.resp_rate > 20,
        r.wbc_per_ul > 12000 or r.wbc_per_ul < 4000,
    ])


def sepsis_label(r: PatientRecord) -> bool:
    return sirs_criteria(r) >= 2


def mortality_score(r: PatientRecord) -> int:
    return sum([r.age_years > 70, r.spo2_pct < 90, r.resp_rate > 24, r.chf_history])


def mortality_label(r: PatientRecord) -> bool:
    return mortality_score(r) >= 2


def note_findings(r: PatientRecord) -> list[str]:
    findings = []
    if r.temperature_c > 38.0:
        findings.append("fever")
    elif r.temperature_c < 36.0:
        findings.append("hypothermia")
    if r.heart_rate_bpm > 100:
        findings.append("tachycardia")
    if r.sbp_mmhg < 90:
        findings.append("hypotension")
    if r.wbc_per_ul > 12000:
        findings.append("leukocytosis")
    elif r.wbc_per_ul < 4000:
        findings.append("leukopenia")
    if r.urine_output_low:
        findings.append("decreased urine output")
    return findings


def note_target(r: PatientRecord) -> str:
    findings = note_findings(r)
    if not findings:
        return "Patient vitals are within normal limits."
    return "Patient exhibits " + " and ".join(findings) + "."


# --- cohort generation ---------------------------------------------------

def _grid(lo, hi, step):
    return np.round(np.arange(lo, hi + step / 2, step), 1)

_NORMAL = {
    "temperature_c": _grid(36.0, 37.5, 0.5),
    "heart_rate_bpm": _grid(60, 90, 5),
    "resp_rate": _grid(12, 20, 2),
    "wbc_per_ul": _grid(5000, 11000, 1000),
    "sbp_mmhg": _grid(100, 140, 5),
    "spo2_pct": _grid(94, 100, 2),
    "lactate_mmol": _grid(0.5, 2.0, 0.5),
    "creatinine_mg_dl": _grid(0.6, 1.2, 0.2),
    "age_years": _grid(30, 70, 5),
}

_ABNORMAL = {
    "temperature_c": np.concatenate([_grid(34.0, 35.5, 0.5), _grid(38.5, 41.5, 0.5)]),
    "heart_rate_bpm": _grid(95, 175, 5),
    "resp_rate": _grid(22, 40, 2),
    "wbc_per_ul": np.concatenate([_grid(1000, 3000, 1000), _grid(13000, 29000, 1000)]),
    "sbp_mmhg": _grid(70, 95, 5),
    "spo2_pct": _grid(80, 92, 2),
    "lactate_mmol": _grid(2.5, 6.0, 0.5),
    "creatinine_mg_dl": _grid(1.4, 3.0, 0.2),
    "age_years": _grid(72, 92, 5),
}


# Fields abnormalize together within a group, but groups draw independent
# severity bits, so the three task labels stay close to uncorrelated.
_GROUPS = {
    "inflammation": ("temperature_c", "heart_rate_bpm", "wbc_per_ul"),
    "respiratory": ("resp_rate",),
    "comorbidity": ("age_years", "spo2_pct"),
    "perfusion": ("sbp_mmhg",),
    "background": ("lactate_mmol", "creatinine_mg_dl"),
}


def _sample_record(rng: np.random.Generator) -> PatientRecord:
    vals = {}
    for group, fields in _GROUPS.items():
        severe = rng.random() < (0.3 if group == "background" else 0.5)
        p_abnormal = 0.98 if severe else 0.02
        for field in fields:
            pool = _ABNORMAL[field] if rng.random() < p_abnormal else _NORMAL[field]
            vals[field] = float(rng.choice(pool))
    comorbid = vals["age_years"] > 70 or vals["spo2_pct"] < 94
    return PatientRecord(
        temperature_c=vals["temperature_c"],
        heart_rate_bpm=vals["heart_rate_bpm"],
        sbp_mmhg=vals["sbp_mmhg"],
        dbp_mmhg=vals["sbp_mmhg"] - float(rng.choice(_grid(30, 50, 5))),
        resp_rate=vals["resp_rate"],
        wbc_per_ul=vals["wbc_per_ul"],
        spo2_pct=vals["spo2_pct"],
        lactate_mmol=vals["lactate_mmol"],
        creatinine_mg_dl=vals["creatinine_mg_dl"],
        age_years=int(vals["age_years"]),
        chf_history=bool(rng.random() < (0.5 if comorbid else 0.1)),
        urine_output_low=bool(rng.random() < (0.4 if vals["sbp_mmhg"] < 100 else 0.05)),
    )


def render_prompt(record: PatientRecord, task: str) -> str:
    r = record
    if task == "sepsis":
        data = (f"temperature {r.temperature_c:.1f} C, heart rate {r.heart_rate_bpm:.0f} bpm, "
                f"respiratory rate {r.resp_rate:.0f} breaths/min, WBC count {r.wbc_per_ul:.0f} /uL")
        return f"Patient vitals and labs: {data} \n Question: {SEPSIS_QUESTION}"
    if task == "mortality":
        chf = "yes" if r.chf_history else "no"
        data = (f"age {r.age_years} years, oxygen saturation {r.spo2_pct:.0f} %, "
                f"respiratory rate {r.resp_rate:.0f} breaths/min, chronic heart failure {chf}")
        return f"Patient ICU notes and labs: {data} \n Question: {MORTALITY_QUESTION}"
    if task == "note":
        urine = "low" if r.urine_output_low else "normal"
        data = (f"temperature {r.temperature_c:.1f} C, heart rate {r.heart_rate_bpm:.0f} bpm, "
                f"blood pressure {r.sbp_mmhg:.0f}/{r.dbp_mmhg:.0f} mmHg, "
                f"WBC count {r.wbc_per_ul:.0f} /uL, urine output {urine}")
        return f"Patient summary: {data} \n {NOTE_INSTRUCTION}"
    raise ConfigError(f"unknown task {task!r}")


def _target_for(record: PatientRecord, task: str) -> str:
    if task == "sepsis":
        return YES if sepsis_label(record) else NO
    if task == "mortality":
        return YES if mortality_label(record) else NO
    return note_target(record)


def generate_cohort(task: str, n: int, seed: int) -> list[LabeledExample]:
    """Seeded cohort; classification tasks are balanced to ceil(n/2) positives."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    examples: list[LabeledExample] = []
    if task == "note":
        while len(examples) < n:
            r = _sample_record(rng)
            examples.append(LabeledExample(task, render_prompt(r, task), _target_for(r, task), r))
        return examples
    want_pos = (n + 1) // 2
    want_neg = n - want_pos
    pos, neg = [], []
    while len(pos) < want_pos or len(neg) < want_neg:
        r = _sample_record(rng)
        ex = LabeledExample(task, render_prompt(r, task), _target_for(r, task), r)
        bucket = pos if ex.target_text == YES else neg
        if (len(bucket) < want_pos) if bucket is pos else (len(bucket) < want_neg):
            bucket.append(ex)
    order = rng.permutation(n)
    merged = pos + neg
    return [merged[i] for i in order]


def split_cohort(examples: list[LabeledExample], fractions=(0.7, 0.15, 0.15)):
    """Deterministic train/val/test split over an already shuffled cohort."""
    n = len(examples)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return examples[:n_train], examples[n_train:n_train + n_val], examples[n_train + n_val:]


# --- tokenizer -----------------------------------------------------------

_TOKEN_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]")


def tokenize_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: list[str]):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokenize_text(text)]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token[i] for i in ids
                        if i not in (PAD_ID, BOS_ID, EOS_ID))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.token_to_id, f, indent=0, sort_keys=True)

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path) as f:
            mapping = json.load(f)
        ordered = sorted(mapping, key=mapping.get)
        return Vocabulary([t for t in ordered if t not in RESERVED])


def build_vocab(examples: list[LabeledExample]) -> Vocabulary:
    seen: dict[str, None] = {}
    for ex in examples:
        for tok in tokenize_text(ex.prompt_text) + tokenize_text(ex.target_text):
            seen.setdefault(tok)
    return Vocabulary(sorted(seen))


# --- few-shot assembly and answer parsing --------------------------------

def select_shots(pool: list[LabeledExample], k: int, seed: int) -> list[LabeledExample]:
    if len(pool) < k:
        raise ConfigError(f"shot pool of {len(pool)} cannot supply {k} shots")
    idx = np.random.default_rng(seed).permutation(len(pool))[:k]
    return [pool[i] for i in idx]


def few_shot_assemble(shots: list[LabeledExample], query_prompt: str, k: int = 16) -> str:
    if len(shots) < k:
        raise ConfigError(f"need {k} shots, got {len(shots)}")
    if k == 0:
        return query_prompt
    blocks = [f"{s.prompt_text} {s.target_text}" for s in shots[:k]]
    return "\n".join(blocks) + "\n" + query_prompt


def parse_answer(generated: str, task: str) -> str:
    if task not in ("sepsis", "mortality"):
        raise ConfigError(f"parse_answer applies to classification tasks, not {task!r}")
    tokens = tokenize_text(generated.strip())
    if not tokens:
        return UNPARSEABLE
    if tokens[0] == "yes":
        return YES
    if tokens[0] == "no":
        return NO
    return UNPARSEABLE


# --- cohort file IO ------------------------------------------------------

def save_cohort(examples: list[LabeledExample], path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")


def load_cohort(path) -> list[LabeledExample]:
    with open(path) as f:
        return [LabeledExample.from_dict(json.loads(line)) for line in f if line.strip()]
