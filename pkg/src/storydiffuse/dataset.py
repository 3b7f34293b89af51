"""Synthetic fictional visual-story corpus.

Each story follows one main character (plus an optional friend) through N
panels.  A panel's "image" is a vector of integer scene attributes (one-hot
blocks for the entities on screen plus a few clutter bits); its caption is
a template realization that mentions those entities.  All sampling goes
through integer draws so corpora are identical across platforms.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nncore import Rng
from .nncore.layers import ConfigError

PAD, BOS = "<pad>", "<bos>"
PAD_ID, BOS_ID = 0, 1
SPLITS = ("train", "val", "test")

NAMES = ["pip", "tom", "lily", "max", "ruby", "otto", "nina", "leo", "zoe", "finn"]
FRIENDS = ["sam", "kim", "bo", "ada", "eli", "ivy", "ray", "una"]
SPECIES = ["cat", "dog", "fox", "bear", "rabbit", "owl", "frog", "mouse"]
COLORS = ["red", "blue", "green", "yellow", "brown", "white", "black", "orange"]
SETTINGS = ["forest", "river", "park", "house", "garden", "beach", "castle", "market", "school", "farm"]
ACTIONS = ["plays", "runs", "jumps", "sings", "reads", "eats", "dances", "paints", "swims", "cooks"]
OBJECTS = ["apple", "ball", "book", "kite", "cake", "hat", "boat", "drum", "flower", "lamp"]
MOODS = ["happy", "sad", "tired", "excited", "scared", "calm"]
TIMES = ["morning", "evening", "night", "afternoon"]
CONNECTIVES = ["then", "later"]
FUNCTION_WORDS = ["in", "the", ",", "is", "at", ".", "feels", "and", "with", "a"]
N_CLUTTER = 8
# chance that a later panel's image hides the main character's identity, so
# the name must come from the other panels
P_OCCLUDE = 0.125

# one-hot block layout of the scene attribute vector
BLOCKS: list[tuple[str, int]] = [
    ("name", len(NAMES)),
    ("species", len(SPECIES)),
    ("color", len(COLORS)),
    ("friend", len(FRIENDS)),
    ("setting", len(SETTINGS)),
    ("action", len(ACTIONS)),
    ("object", len(OBJECTS)),
    ("mood", len(MOODS)),
    ("time", len(TIMES)),
    ("clutter", N_CLUTTER),
]
ATTR_DIM = sum(n for _, n in BLOCKS)

PRESETS = {
    "pororo-like": {"n_panels": 5, "max_len": 32},
    "didemo-like": {"n_panels": 3, "max_len": 16},
}


def grammar_vocab() -> list[str]:
    words = [PAD, BOS]
    for group in (FUNCTION_WORDS, CONNECTIVES, NAMES, FRIENDS, SPECIES, COLORS, SETTINGS, ACTIONS, OBJECTS, MOODS, TIMES):
        for w in group:
            if w not in words:
                words.append(w)
    return words


@dataclass
class CorpusConfig:
    preset: str = "pororo-like"
    n_panels: int = 5
    max_len: int = 32
    vocab_size: int = 200
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    seed: int = 0

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "CorpusConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(preset=name, **{**PRESETS[name], **overrides})

    def validate(self) -> None:
        if self.n_panels < 1 or self.max_len < 12:
            raise ConfigError("corpus: need n_panels >= 1 and max_len >= 12")
        need = len(grammar_vocab())
        if self.vocab_size < need:
            raise ConfigError(f"corpus: vocab_size {self.vocab_size} < grammar vocabulary {need}")


class Vocab:
    """Closed word-level vocabulary; PAD is id 0, BOS id 1."""

    def __init__(self, words: list[str]):
        if words[:2] != [PAD, BOS]:
            raise ValueError("vocabulary must start with <pad>, <bos>")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> list[int]:
        out = []
        for w in text.lower().split():
            if w not in self.index:
                raise KeyError(f"unknown word {w!r}")
            out.append(self.index[w])
        return out

    def detokenize(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids if int(i) not in (PAD_ID, BOS_ID))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n"))


def pad_tokens(ids: list[int], L: int) -> list[int]:
    if len(ids) > L:
        raise ValueError(f"sequence of {len(ids)} tokens exceeds max_len {L}")
    return list(ids) + [PAD_ID] * (L - len(ids))


def strip_padding(ids) -> list[int]:
    return [int(i) for i in ids if int(i) not in (PAD_ID, BOS_ID)]


@dataclass
class Panel:
    image_id: str
    scene_attributes: list[int]
    caption: str


@dataclass
class StorySample:
    story_id: str
    split: str
    panels: list[Panel] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "StorySample":
        return cls(d["story_id"], d["split"], [Panel(**p) for p in d["panels"]])


def _one_hot(block: str, idx: int | None, out: np.ndarray) -> None:
    start = 0
    for name, n in BLOCKS:
        if name == block:
            if idx is not None:
                out[start + idx] = 1
            return
        start += n
    raise KeyError(block)


def _make_story(rng: Rng, cfg: CorpusConfig, story_id: str, split: str) -> StorySample:
    """A panel's attributes encode exactly the entities its caption mentions,
    except that a later panel may hide the main character (see P_OCCLUDE)."""

    def pick(n: int) -> int:
        return int(rng.integers(0, n))

    name, friend = pick(len(NAMES)), pick(len(FRIENDS))
    species, color, time_ = pick(len(SPECIES)), pick(len(COLORS)), pick(len(TIMES))
    setting = pick(len(SETTINGS))
    conn = CONNECTIVES[pick(len(CONNECTIVES))]
    long_form = cfg.max_len >= 24
    occlude_den = round(1 / P_OCCLUDE)

    panels = []
    for i in range(cfg.n_panels):
        if i > 0 and pick(3) == 0:
            setting = pick(len(SETTINGS))
        with_friend = pick(2) == 1
        action, obj, mood = pick(len(ACTIONS)), pick(len(OBJECTS)), pick(len(MOODS))
        hidden = i > 0 and pick(occlude_den) == 0

        who = NAMES[name]
        partner = f"with {FRIENDS[friend]} and a {OBJECTS[obj]}" if with_friend else f"with a {OBJECTS[obj]}"
        shown = {"name": None if hidden else name, "setting": setting, "action": action, "object": obj,
                 "friend": friend if with_friend else None}
        if long_form:
            shown["mood"] = mood
            if i == 0:
                shown.update(species=species, color=color, time=time_)
                text = (
                    f"in the {TIMES[time_]} , {who} the {COLORS[color]} {SPECIES[species]} is at the "
                    f"{SETTINGS[setting]} . {who} feels {MOODS[mood]} and {ACTIONS[action]} {partner} ."
                )
            else:
                text = (
                    f"{conn} {who} {ACTIONS[action]} {partner} at the {SETTINGS[setting]} . "
                    f"{who} feels {MOODS[mood]} ."
                )
        else:
            if i == 0:
                shown.update(species=species, color=color)
                lead = f"{who} the {COLORS[color]} {SPECIES[species]}"
            else:
                lead = f"{conn} {who}"
            text = f"{lead} {ACTIONS[action]} {partner} at the {SETTINGS[setting]} ."

        attrs = np.zeros(ATTR_DIM, dtype=np.int64)
        for block, idx in shown.items():
            _one_hot(block, idx, attrs)
        attrs[ATTR_DIM - N_CLUTTER :] = rng.integers(0, 2, size=N_CLUTTER)
        panels.append(Panel(f"{story_id}-p{i}", attrs.tolist(), text))
    return StorySample(story_id, split, panels)


def generate_corpus(cfg: CorpusConfig) -> dict[str, list[StorySample]]:
    """Deterministic corpus per ``cfg.seed``; splits are disjoint by story_id."""
    cfg.validate()
    rng = Rng(cfg.seed).child("dataset")
    corpus: dict[str, list[StorySample]] = {}
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split in SPLITS:
        split_rng = rng.child(split)
        corpus[split] = [_make_story(split_rng, cfg, f"{split}-{i:05d}", split) for i in range(counts[split])]
    vocab = set(grammar_vocab())
    for split in SPLITS:
        for s in corpus[split]:
            for p in s.panels:
                words = p.caption.split()
                if len(words) > cfg.max_len:
                    raise ConfigError(f"caption longer than max_len {cfg.max_len}: {p.caption!r}")
                unknown = [w for w in words if w not in vocab]
                if unknown:
                    raise ConfigError(f"caption uses words outside the vocabulary: {unknown}")
    return corpus


def write_corpus(corpus: dict[str, list[StorySample]], cfg: CorpusConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        with open(out / f"{split}.jsonl", "w", encoding="utf-8", newline="\n") as f:
            for s in corpus[split]:
                f.write(s.to_json() + "\n")
    Vocab(grammar_vocab()).save(out / "vocab.txt")
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_split(corpus_dir, split: str) -> list[StorySample]:
    path = Path(corpus_dir) / f"{split}.jsonl"
    with open(path, encoding="utf-8") as f:
        return [StorySample.from_dict(json.loads(line)) for line in f if line.strip()]


def load_corpus_config(corpus_dir) -> CorpusConfig:
    return CorpusConfig(**json.loads((Path(corpus_dir) / "config.json").read_text(encoding="utf-8")))


@dataclass
class StoryBatch:
    """Array view of stories: attrs (B, N, A), tokens (B, N, L)."""

    story_ids: list[str]
    attrs: np.ndarray
    tokens: np.ndarray

    @property
    def token_mask(self) -> np.ndarray:
        return self.tokens != PAD_ID


def to_batch(stories: list[StorySample], vocab: Vocab, max_len: int) -> StoryBatch:
    attrs = np.array([[p.scene_attributes for p in s.panels] for s in stories], dtype=np.float64)
    tokens = np.array(
        [[pad_tokens(vocab.tokenize(p.caption), max_len) for p in s.panels] for s in stories], dtype=np.int64
    )
    return StoryBatch([s.story_id for s in stories], attrs, tokens)


def stump_probe_accuracy(stories: list[StorySample], vocab: Vocab) -> dict[str, float]:
    """Per entity token: best single-attribute threshold classifier for
    "caption mentions token", fitted and scored on the same panels."""
    attrs = np.array([p.scene_attributes for s in stories for p in s.panels])
    captions = [set(p.caption.split()) for s in stories for p in s.panels]
    result = {}
    entity_words = NAMES + FRIENDS + SPECIES + COLORS + SETTINGS + ACTIONS + OBJECTS + MOODS + TIMES
    for word in entity_words:
        y = np.array([word in c for c in captions])
        if not y.any():
            continue
        best = max(y.mean(), 1 - y.mean())
        for j in range(attrs.shape[1]):
            f = attrs[:, j] > 0.5
            acc = (f == y).mean()
            best = max(best, acc, 1 - acc)
        result[word] = float(best)
    return result
