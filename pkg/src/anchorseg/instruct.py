"""Instruction corpus construction: annotations, templates, mixing, export.

Samples are composed online from dataset records and small template
libraries.  Composition is a pure function of (record, task, draw index,
seed), so a corpus regenerates byte-identically.  Structured annotations are
filled by a deterministic grammar over the defect metadata; phrasing variants
are picked by a stable hash of the metadata, never by the sampling stream.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synth import (
    DEFECT_ENTITY, DefectMeta, ManifestRecord, load_image, select_reference,
)

ANCHOR_TRIPLE = "[NOR][ANO][SEG]"

TARGET_WORDS = ("defects", "anomalies", "flaws", "damaged regions")

TASK_DIRECT = "direct"
TASK_DESCRIBE = "describe-then-segment"
TASK_DESCRIBE_PLUS = "describe-then-segment-plus"
TASK_EXPLAIN = "segment-then-explain"
TASK_REJECTION = "rejection"
TASK_GENERAL = "general-seg"
TASK_VQA = "vqa"

ALL_HEADS = ("seg", "nor", "ano")
SEG_ONLY = ("seg",)

SOURCE_GENERAL = "general-seg"
SOURCE_INSTRUCT = "instruct"
SOURCE_DIRECT = "direct-seg"
SOURCE_VQA = "vqa"
SOURCES = (SOURCE_GENERAL, SOURCE_INSTRUCT, SOURCE_DIRECT, SOURCE_VQA)


class UnknownTaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Template libraries
# ---------------------------------------------------------------------------

DIRECT_TEMPLATES = [
    "Please segment the {class_name} in this image.",
    "Segment the {class_name} in this image.",
    "Can you segment the {class_name} here?",
    "Find and segment the {class_name}.",
    "Please locate the {class_name} and output the segmentation map.",
    "Output a segmentation mask for the {class_name}.",
    "Please segment any {class_name} you can find.",
    "Highlight the {class_name} in this image.",
]

DESCRIBE_TEMPLATES = [
    "What are the {class_name} in this image? Please describe them and then output the segmentation map.",
    "Describe the {class_name} in this image and then segment them.",
    "What {class_name} are present in this image? Describe them first, then segment.",
    "First describe the {class_name}, then output a segmentation mask.",
    "Tell me about the {class_name} in this image and then segment them.",
    "Explain what {class_name} you see and then output the segmentation map.",
    "Please describe any {class_name} and then segment them.",
    "Identify the {class_name}, describe them, and output the segmentation map.",
]

EXPLAIN_TEMPLATES = [
    "Please segment the {class_name} in this image and then explain the result.",
    "Segment the {class_name} first, then explain what you found.",
    "Output the segmentation map for the {class_name} and explain it.",
    "Please segment the {class_name} and justify the mask.",
    "Segment any {class_name} and then explain why they are {class_name}.",
    "First segment the {class_name}, then describe what the mask covers.",
    "Give me a segmentation mask for the {class_name} and an explanation.",
    "Please segment and then explain the {class_name} in this image.",
]

GENERAL_TEMPLATES = [
    "Please segment {entity} in this image.",
    "Segment {entity}.",
    "Output a segmentation mask for {entity}.",
    "Can you segment {entity} here?",
    "Find {entity} and segment it.",
    "Please output the segmentation map for {entity}.",
    "Highlight {entity} in this image.",
    "Locate {entity} and output a mask.",
]

VQA_PAIRS = [
    ("What kind of surface is shown in this image?",
     "The image shows a {category} surface."),
    ("What pattern does this image contain?",
     "It contains a {category} pattern."),
    ("Describe the overall appearance of this image.",
     "The image is a {category} texture rendered in grayscale."),
    ("What texture family does this image belong to?",
     "It belongs to the {category} family."),
    ("Can you name the texture in this image?",
     "Sure, this is a {category} texture."),
    ("What does the surface in this image look like?",
     "The surface looks like a {category} pattern."),
    ("Which material pattern is visible here?",
     "A {category} pattern is visible."),
    ("Tell me what this image shows.",
     "This image shows a {category} surface."),
]

DIRECT_RESPONSE = "Sure, it is [NOR][ANO][SEG]."
REJECTION_RESPONSE = "No {class_name} are present in this image, as indicated by [NOR][ANO][SEG]."

TASK_TEMPLATES = {
    TASK_DIRECT: DIRECT_TEMPLATES,
    TASK_DESCRIBE: DESCRIBE_TEMPLATES,
    TASK_DESCRIBE_PLUS: DESCRIBE_TEMPLATES,
    TASK_EXPLAIN: EXPLAIN_TEMPLATES,
    TASK_REJECTION: DIRECT_TEMPLATES,
    TASK_GENERAL: GENERAL_TEMPLATES,
}


def save_templates(path) -> None:
    """Plain-text library: one `task<TAB>template` per line."""
    lines = []
    for task, templates in TASK_TEMPLATES.items():
        for tpl in templates:
            lines.append(f"{task}\t{tpl}")
    for q, a in VQA_PAIRS:
        lines.append(f"{TASK_VQA}\t{q}\t{a}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_templates(path) -> tuple[dict[str, list[str]], list[tuple[str, str]]]:
    tasks: dict[str, list[str]] = {}
    vqa: list[tuple[str, str]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == TASK_VQA:
            vqa.append((parts[1], parts[2]))
        else:
            tasks.setdefault(parts[0], []).append(parts[1])
    return tasks, vqa


# ---------------------------------------------------------------------------
# Structured annotations
# ---------------------------------------------------------------------------

@dataclass
class StructuredAnnotation:
    expectation: str
    observation: str
    diagnosis: str
    summary: str
    explanation: str


_EXPECTATION = {
    "stripes": "A normal sample shows straight parallel stripes with even spacing and uniform contrast.",
    "checker": "A normal sample shows a regular checkerboard of alternating light and dark squares.",
    "blobs": "A normal sample shows smooth rounded patches blending gradually into each other.",
    "bottle": "A normal sample shows one smooth bright disk with even radial shading on a dark background.",
    "mesh": "A normal sample shows a clean regular mesh of thin dark lines on a light background.",
    "speckle": "A normal sample shows a fine even grain with no larger marks.",
}

_DEFECT_NOUN = {
    "hole": "dark hole",
    "scratch": "bright scratch",
    "spot": "bright spot",
    "crack_line": "dark crack",
    "missing_corner": "missing corner",
}

_OBSERVATION_VARIANTS = [
    "There is a {size} {noun} located on the {location} of the surface.",
    "A {size} {noun} appears in the {location} region of the image.",
    "The image shows a {size} {noun} on the {location} part of the surface.",
]

_DIAGNOSIS = {
    "hole": "The dark cavity interrupts the surrounding pattern and breaks the material continuity.",
    "scratch": "The bright streak cuts across the texture and does not follow its regular structure.",
    "spot": "The bright patch stands out from the expected local brightness of the pattern.",
    "crack_line": "The dark line runs against the texture and splits the otherwise continuous surface.",
    "missing_corner": "Part of the surface is absent, leaving a flat region where the pattern should continue.",
}

_SUMMARY_VARIANTS = [
    "The anomaly is a {size} {noun} located on the {location} of the {category}, as indicated by [NOR][ANO][SEG].",
    "There is a {size} {noun} on the {location} of the {category}, as indicated by [NOR][ANO][SEG].",
]

_EXPLANATION_VARIANTS = [
    "The expected {category} pattern is broken by a {size} {noun} in the {location} area, so that region is segmented as anomalous.",
    "Because the {category} surface should be regular, the {size} {noun} in the {location} area is segmented as the anomaly.",
]


def _stable_pick(options: list[str], *keys: str) -> str:
    h = zlib.crc32("|".join(keys).encode("utf-8"))
    return options[h % len(options)]


def build_structured_annotation(meta: DefectMeta) -> StructuredAnnotation:
    if meta is None:
        raise ValueError("structured annotations exist only for anomalous samples")
    noun = _DEFECT_NOUN[meta.defect_type]
    fills = dict(size=meta.size_class, noun=noun, location=meta.location_phrase,
                 category=meta.category)
    keys = (meta.category, meta.defect_type, meta.size_class, meta.location_phrase)
    return StructuredAnnotation(
        expectation=_EXPECTATION[meta.category],
        observation=_stable_pick(_OBSERVATION_VARIANTS, "obs", *keys).format(**fills),
        diagnosis=_DIAGNOSIS[meta.defect_type],
        summary=_stable_pick(_SUMMARY_VARIANTS, "sum", *keys).format(**fills),
        explanation=_stable_pick(_EXPLANATION_VARIANTS, "exp", *keys).format(**fills),
    )


# ---------------------------------------------------------------------------
# Sample composition
# ---------------------------------------------------------------------------

@dataclass
class InstructionSample:
    image_id: str
    image_path: str
    mask_path: str
    instruction: str
    response: str
    task_type: str
    supervised_heads: tuple[str, ...]
    has_mask: bool
    reference_id: str | None = None


def compose_sample(record: ManifestRecord, task_type: str, rng: np.random.Generator,
                   reference_id: str | None = None) -> InstructionSample:
    class_name = str(rng.choice(TARGET_WORDS))

    def pick(templates):
        return templates[int(rng.integers(len(templates)))]

    if task_type == TASK_DIRECT:
        instruction = pick(DIRECT_TEMPLATES).format(class_name=class_name)
        response = DIRECT_RESPONSE
        heads, has_mask = ALL_HEADS, True
    elif task_type == TASK_REJECTION:
        instruction = pick(DIRECT_TEMPLATES).format(class_name=class_name)
        response = REJECTION_RESPONSE.format(class_name=class_name)
        heads, has_mask = ALL_HEADS, True
    elif task_type in (TASK_DESCRIBE, TASK_DESCRIBE_PLUS, TASK_EXPLAIN):
        ann = build_structured_annotation(record.meta)
        if task_type == TASK_DESCRIBE:
            instruction = pick(DESCRIBE_TEMPLATES).format(class_name=class_name)
            response = ann.summary
        elif task_type == TASK_DESCRIBE_PLUS:
            instruction = (ann.expectation + " "
                           + pick(DESCRIBE_TEMPLATES).format(class_name=class_name))
            response = ann.summary
        else:
            instruction = pick(EXPLAIN_TEMPLATES).format(class_name=class_name)
            response = f"Sure, it is [NOR][ANO][SEG]. {ann.explanation}"
        heads, has_mask = ALL_HEADS, True
    elif task_type == TASK_GENERAL:
        entity = DEFECT_ENTITY[record.meta.defect_type]
        instruction = pick(GENERAL_TEMPLATES).format(entity=entity)
        response = DIRECT_RESPONSE
        heads, has_mask = SEG_ONLY, True
    elif task_type == TASK_VQA:
        q, a = VQA_PAIRS[int(rng.integers(len(VQA_PAIRS)))]
        instruction = q
        response = a.format(category=record.category)
        heads, has_mask = (), False
    else:
        raise UnknownTaskError(task_type)

    return InstructionSample(
        image_id=record.sample_id, image_path=record.image_path,
        mask_path=record.mask_path, instruction=instruction, response=response,
        task_type=task_type, supervised_heads=heads, has_mask=has_mask,
        reference_id=reference_id,
    )


# ---------------------------------------------------------------------------
# Source mixing
# ---------------------------------------------------------------------------

@dataclass
class MixerConfig:
    weights: tuple[float, float, float, float] = (0.4, 0.25, 0.25, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.weights) != len(SOURCES):
            raise ValueError(f"need {len(SOURCES)} source weights")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("source weights must be nonnegative and sum to 1")


def mix_batches(cfg: MixerConfig, n: int) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31337]))
    idx = rng.choice(len(SOURCES), size=n, p=list(cfg.weights))
    return [SOURCES[i] for i in idx]


class CorpusSampler:
    """Online, seed-deterministic instruction stream over the train records.

    Draw i derives its own rng from (seed, i), so samples are reproducible
    and independent of who else consumed the stream.
    """

    INSTRUCT_TASKS = (TASK_DESCRIBE, TASK_DESCRIBE_PLUS, TASK_EXPLAIN)

    def __init__(self, root, records: list[ManifestRecord], mixer: MixerConfig,
                 rejection_templates: bool = True, reference_pool_size: int = 20):
        self.root = Path(root)
        self.records = [r for r in records if r.split == "train"]
        if not self.records:
            raise ValueError("no train records")
        self.anomalous = [r for r in self.records if r.is_anomalous]
        self.normal = [r for r in self.records if not r.is_anomalous]
        if not self.anomalous:
            raise ValueError("sampler needs anomalous train records")
        self.mixer = mixer
        self.rejection_templates = rejection_templates
        self._pools: dict[str, list[ManifestRecord]] = {}
        for r in self.normal:
            pool = self._pools.setdefault(r.category, [])
            if len(pool) < reference_pool_size:
                pool.append(r)
        self._pool_images: dict[str, list[np.ndarray]] = {}
        self._reference_cache: dict[str, str | None] = {}
        self._image_cache: dict[str, np.ndarray] = {}
        self._mask_cache: dict[str, np.ndarray] = {}

    def _load(self, record: ManifestRecord) -> np.ndarray:
        img = self._image_cache.get(record.sample_id)
        if img is None:
            img = load_image(self.root, record)
            self._image_cache[record.sample_id] = img
        return img

    def image_of(self, sample: "InstructionSample") -> np.ndarray:
        img = self._image_cache.get(sample.image_id)
        if img is None:
            from .synth import read_pgm, u8_to_image
            img = u8_to_image(read_pgm(self.root / sample.image_path))
            self._image_cache[sample.image_id] = img
        return img

    def mask_of(self, sample: "InstructionSample") -> np.ndarray:
        m = self._mask_cache.get(sample.image_id)
        if m is None:
            from .synth import read_pgm
            m = read_pgm(self.root / sample.mask_path) > 127
            self._mask_cache[sample.image_id] = m
        return m

    def _reference_for(self, record: ManifestRecord) -> str | None:
        if record.sample_id in self._reference_cache:
            return self._reference_cache[record.sample_id]
        pool = self._pools.get(record.category, [])
        if not pool:
            self._reference_cache[record.sample_id] = None
            return None
        if record.category not in self._pool_images:
            self._pool_images[record.category] = [self._load(r) for r in pool]
        idx = select_reference(self._load(record), self._pool_images[record.category])
        ref = pool[idx].sample_id
        self._reference_cache[record.sample_id] = ref
        return ref

    def draw(self, index: int) -> InstructionSample:
        rng = np.random.default_rng(np.random.SeedSequence([self.mixer.seed, 71, index]))
        source = SOURCES[int(rng.choice(len(SOURCES), p=list(self.mixer.weights)))]
        if source == SOURCE_GENERAL:
            record = self.anomalous[int(rng.integers(len(self.anomalous)))]
            return compose_sample(record, TASK_GENERAL, rng)
        if source == SOURCE_INSTRUCT:
            record = self.anomalous[int(rng.integers(len(self.anomalous)))]
            task = self.INSTRUCT_TASKS[int(rng.integers(len(self.INSTRUCT_TASKS)))]
            return compose_sample(record, task, rng, reference_id=self._reference_for(record))
        if source == SOURCE_DIRECT:
            record = self.records[int(rng.integers(len(self.records)))]
            if record.is_anomalous:
                return compose_sample(record, TASK_DIRECT, rng)
            task = TASK_REJECTION if self.rejection_templates else TASK_DIRECT
            return compose_sample(record, task, rng)
        record = self.records[int(rng.integers(len(self.records)))]
        return compose_sample(record, TASK_VQA, rng)

    def batch(self, start: int, size: int) -> list[InstructionSample]:
        return [self.draw(i) for i in range(start, start + size)]


# ---------------------------------------------------------------------------
# Corpus export / import
# ---------------------------------------------------------------------------

def export_corpus(samples: list[InstructionSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "image_id": s.image_id,
                "image": s.image_path,
                "mask": s.mask_path,
                "instruction": s.instruction,
                "response": s.response,
                "task": s.task_type,
                "heads": list(s.supervised_heads),
                "has_mask": s.has_mask,
                "reference": s.reference_id,
            }) + "\n")


def import_corpus(path) -> list[InstructionSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(InstructionSample(
                image_id=d["image_id"], image_path=d["image"], mask_path=d["mask"],
                instruction=d["instruction"], response=d["response"],
                task_type=d["task"], supervised_heads=tuple(d["heads"]),
                has_mask=d["has_mask"], reference_id=d["reference"],
            ))
    return out


# ---------------------------------------------------------------------------
# Vocabulary corpus
# ---------------------------------------------------------------------------

def vocabulary_corpus() -> list[str]:
    """Every word the template grammar can emit, for vocabulary construction."""
    from .lm import words_of
    from .synth import CATEGORIES, DEFECT_TYPES, LOCATION_PHRASES, SIZE_CLASSES

    texts = ["User:", "Assistant:", DIRECT_RESPONSE, REJECTION_RESPONSE]
    for templates in (DIRECT_TEMPLATES, DESCRIBE_TEMPLATES, EXPLAIN_TEMPLATES,
                      GENERAL_TEMPLATES):
        texts.extend(templates)
    for q, a in VQA_PAIRS:
        texts.extend([q, a])
    texts.extend(_EXPECTATION.values())
    texts.extend(_OBSERVATION_VARIANTS)
    texts.extend(_DIAGNOSIS.values())
    texts.extend(_SUMMARY_VARIANTS)
    texts.extend(_EXPLANATION_VARIANTS)
    texts.extend(TARGET_WORDS)
    texts.extend(DEFECT_ENTITY.values())
    texts.extend(_DEFECT_NOUN.values())
    texts.extend(SIZE_CLASSES)
    texts.extend(CATEGORIES.keys())
    texts.extend(DEFECT_TYPES)
    for row in LOCATION_PHRASES:
        texts.extend(row)
    words = set()
    for text in texts:
        for w in words_of(text):
            if "{" not in w and "}" not in w:
                words.add(w)
    return sorted(words)
